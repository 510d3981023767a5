"""Reference kernels: token cross-attention, body-mask weighted loss, token layout.

These operate on externally supplied feature matrices; no feature extractor or
diffusion network is involved.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Union

import numpy as np

from dfcikit.errors import FormatError, ValidationError

DEFAULT_LAMBDA = 4.0


def _matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite entries")
    return a


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtracted)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def attention_weights(Q: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Row-stochastic ``softmax(Q K^T / sqrt(f))``."""
    f = Q.shape[1]
    return softmax(Q @ K.T / math.sqrt(f), axis=1)


def sampler_attention(D, W_K, W_V, Q, return_weights: bool = False):
    """Select ``n`` body tokens from ``N`` patch tokens by cross-attention.

    ``K = D W_K``, ``V = D W_V`` and the output is
    ``softmax(Q K^T / sqrt(f_em)) V`` with shape ``n x f_em``.
    """
    D = _matrix(D, "D")
    W_K = _matrix(W_K, "W_K")
    W_V = _matrix(W_V, "W_V")
    Q = _matrix(Q, "Q")
    f = D.shape[1]
    if W_K.shape != (f, f) or W_V.shape != (f, f):
        raise ValidationError(
            f"projections must be {f}x{f}, got W_K {W_K.shape} and W_V {W_V.shape}"
        )
    if Q.shape[1] != f or Q.shape[0] < 1:
        raise ValidationError(f"Q must be n x {f} with n >= 1, got {Q.shape}")
    K = D @ W_K
    V = D @ W_V
    A = attention_weights(Q, K)
    out = A @ V
    return (out, A) if return_weights else out


def facial_attention(q_global, K_local, V_local, return_weights: bool = False):
    """Attend from one global face embedding over ``M`` local patch tokens.

    Returns ``softmax(q K^T / sqrt(f_em)) V`` as a ``1 x f_em`` row.
    """
    q = _matrix(q_global, "q_global")
    K = _matrix(K_local, "K_local")
    V = _matrix(V_local, "V_local")
    if q.shape[0] != 1:
        raise ValidationError(f"q_global must be a single row, got {q.shape}")
    f = q.shape[1]
    if K.shape[0] < 1 or K.shape[1] != f or V.shape != K.shape:
        raise ValidationError(
            f"K_local {K.shape} and V_local {V.shape} must both be M x {f} with M >= 1"
        )
    A = attention_weights(q, K)
    out = A @ V
    return (out, A) if return_weights else out


def _loss_inputs(eps, pred, m, lam):
    eps = np.asarray(eps, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if eps.shape != pred.shape or m.shape != eps.shape:
        raise ValidationError(
            f"eps {eps.shape}, pred {pred.shape} and mask {m.shape} must share one shape"
        )
    if eps.size == 0:
        raise ValidationError("loss over an empty tensor")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValidationError("mask must be binary")
    if not (np.all(np.isfinite(eps)) and np.all(np.isfinite(pred))):
        raise ValidationError("non-finite loss inputs")
    if not lam >= 1.0:
        raise ValidationError(f"lambda must be >= 1, got {lam}")
    return eps, pred, m


def masked_loss_terms(eps, pred, m, lam: float = DEFAULT_LAMBDA) -> tuple:
    """Background and foreground mean-squared terms (both averaged over all N)."""
    eps, pred, m = _loss_inputs(eps, pred, m, lam)
    r = eps - pred
    background = float(np.mean((r * (1.0 - m)) ** 2))
    foreground = float(np.mean((r * m) ** 2))
    return background, foreground


def masked_loss(eps, pred, m, lam: float = DEFAULT_LAMBDA) -> float:
    """``mean(((eps - pred)(1 - m))^2) + lam * mean(((eps - pred) m)^2)``."""
    background, foreground = masked_loss_terms(eps, pred, m, lam)
    return background + lam * foreground


def masked_loss_grad(eps, pred, m, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Gradient of :func:`masked_loss` with respect to ``pred``."""
    eps, pred, m = _loss_inputs(eps, pred, m, lam)
    return -(2.0 / eps.size) * (eps - pred) * ((1.0 - m) + lam * m)


def token_layout(L: int, k: int, h: int, w: int, N: int, mode: str = "strict") -> int:
    """Sequence length of latent tokens plus ``N`` identity tokens.

    ``strict`` compresses each block of ``k`` frames (``L / k`` latent frames);
    ``causal`` keeps the first frame on its own (``1 + (L - 1) / k``).
    """
    for name, val in (("L", L), ("k", k), ("h", h), ("w", w)):
        if int(val) != val or val < 1:
            raise ValidationError(f"{name} must be a positive integer, got {val}")
    if int(N) != N or N < 0:
        raise ValidationError(f"N must be a non-negative integer, got {N}")
    if mode == "strict":
        if L % k:
            raise ValidationError(f"strict layout needs k | L, got L={L}, k={k}")
        frames = L // k
    elif mode == "causal":
        if (L - 1) % k:
            raise ValidationError(f"causal layout needs k | (L - 1), got L={L}, k={k}")
        frames = 1 + (L - 1) // k
    else:
        raise ValidationError(f"unknown layout mode {mode!r}")
    return frames * h * w + N


# plain-text matrices: "# rows cols" header, then whitespace-separated rows

def parse_matrix(text: str) -> np.ndarray:
    header = None
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if header is None:
                parts = line[1:].split()
                try:
                    header = (int(parts[0]), int(parts[1]))
                except (IndexError, ValueError) as exc:
                    raise FormatError(f"bad matrix header {line!r}") from exc
            continue
        try:
            rows.append([float(x) for x in line.split()])
        except ValueError as exc:
            raise FormatError(f"non-numeric matrix row {line!r}") from exc
    if header is None:
        raise FormatError("matrix text lacks a '# rows cols' header")
    r, c = header
    if len(rows) != r or any(len(row) != c for row in rows):
        raise FormatError(f"matrix body does not match declared {r}x{c}")
    return np.array(rows, dtype=np.float64).reshape(r, c)


def format_matrix(a: np.ndarray) -> str:
    a = _matrix(a, "matrix")
    lines = [f"# {a.shape[0]} {a.shape[1]}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in a]
    return "\n".join(lines) + "\n"


def load_matrix(path: Union[str, Path]) -> np.ndarray:
    return parse_matrix(Path(path).read_text())


def save_matrix(path: Union[str, Path], a: np.ndarray) -> None:
    Path(path).write_text(format_matrix(a))
