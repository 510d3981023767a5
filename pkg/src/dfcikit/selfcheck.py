"""Oracle, gradient and round-trip suites behind ``dfcikit self-check``.

Every suite uses fixed seeds and compares the library against an independent
reference written here with plain loops, so the output is identical run to
run. ``fault`` injects a known defect to prove a suite can fail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from dfcikit import kernels, metrics
from dfcikit.media_io import FlowField, MetricReport, read_flo, read_report, \
    significant_equal, write_flo, write_report
from dfcikit.synthetic import random_flows, random_masks

FAULTS = ("lambda-sign",)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str


# ---------------------------------------------------------------------------
# independent references
# ---------------------------------------------------------------------------


def naive_dfci(flows_gt, flows_gen, masks=None) -> float:
    total = 0.0
    valid = 0
    for i in range(len(flows_gt)):
        a, b = flows_gt[i], flows_gen[i]
        h, w = a.shape
        acc = 0.0
        count = 0
        for y in range(h):
            for x in range(w):
                if masks is not None and masks[i][y][x] == 0:
                    continue
                acc += abs(float(a.u[y, x]) - float(b.u[y, x]))
                acc += abs(float(a.v[y, x]) - float(b.v[y, x]))
                count += 1
        if count:
            total += acc / count
            valid += 1
    return total / (2 * valid)


def naive_dice(a, b) -> float:
    sa = {(y, x) for y, x in zip(*np.nonzero(a))}
    sb = {(y, x) for y, x in zip(*np.nonzero(b))}
    if not sa and not sb:
        return 1.0
    return 2 * len(sa & sb) / (len(sa) + len(sb))


def naive_attention(Q, K, V) -> np.ndarray:
    f = len(Q[0])
    out = []
    for q in Q:
        logits = [sum(q[j] * k[j] for j in range(f)) / math.sqrt(f) for k in K]
        top = max(logits)
        w = [math.exp(z - top) for z in logits]
        s = sum(w)
        out.append([sum(w[i] / s * V[i][j] for i in range(len(V))) for j in range(len(V[0]))])
    return np.array(out)


def finite_difference_grad(loss: Callable, eps, pred, m, lam, h: float = 1e-3) -> np.ndarray:
    pred = np.array(pred, dtype=np.float64)
    g = np.empty_like(pred)
    flat = pred.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss(eps, pred, m, lam)
        flat[i] = old - h
        down = loss(eps, pred, m, lam)
        flat[i] = old
        gf[i] = (up - down) / (2.0 * h)
    return g


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def suite_dfci_oracle(seeds: int = 10) -> SuiteResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        L = 8
        masks = random_masks(rng, L, 16, 16)
        for T in range(1, 6):
            gt = random_flows(rng, L - T, 16, 16)
            gen = random_flows(rng, L - T, 16, 16)
            for m in (None, masks):
                fast = metrics.dfci(gt, gen, m, T).value
                slow = naive_dfci(gt, gen, m)
                worst = max(worst, abs(fast - slow) / abs(slow))
    return SuiteResult("dfci_oracle", worst <= 1e-10, f"max rel err {worst:.2e}")


def suite_dfci_analytic() -> SuiteResult:
    rng = np.random.default_rng(7)
    worst = 0.0
    identical_ok = True
    masks = random_masks(rng, 8, 12, 12)
    for T in range(1, 6):
        gt = random_flows(rng, 8 - T, 12, 12)
        for m in (None, masks):
            identical_ok &= metrics.dfci(gt, gt, m, T).value == 0.0
            for a, b in ((0.5, -1.0), (-2.25, 3.0)):
                gen = [FlowField(f.u + a, f.v + b) for f in gt]
                got = metrics.dfci(gt, gen, m, T).value
                worst = max(worst, abs(got - (abs(a) + abs(b)) / 2))
    ok = identical_ok and worst <= 1e-12
    return SuiteResult("dfci_analytic", ok, f"identical exact={identical_ok}, offset err {worst:.1e}")


def suite_dice(pairs: int = 200) -> SuiteResult:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(pairs):
        p, q = rng.random(2)
        a = rng.random((32, 32)) < p
        b = rng.random((32, 32)) < q
        worst = max(worst, abs(metrics.dice(a, b) - naive_dice(a, b)))
    a = np.zeros((2, 2))
    a[0, :] = 1
    b = np.zeros((2, 2))
    b[:, 0] = 1
    hand = metrics.dice(a, b) == 0.5
    empty = metrics.dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    ok = worst <= 1e-12 and hand and empty
    return SuiteResult("dice_oracle", ok, f"max err {worst:.1e}, hand={hand}, empty={empty}")


def suite_classical() -> SuiteResult:
    from dfcikit.media_io import VideoFrames

    h = w = 16
    g = VideoFrames([np.full((h, w, 3), 0.3)] * 2)
    g1 = VideoFrames([np.full((h, w, 3), 0.4)] * 2)
    zero = VideoFrames([np.zeros((h, w, 3))] * 2)
    one = VideoFrames([np.ones((h, w, 3))] * 2)
    c1 = metrics.SSIM_C1
    errs = [
        abs(metrics.psnr(g, g1) - 20.0),
        abs(metrics.psnr(g, g) - 100.0),
        abs(metrics.psnr(zero, one) - 0.0),
        abs(metrics.l1_metric(g, g1) - 0.1),
        abs(metrics.ssim(g, g) - 1.0),
        abs(metrics.ssim(zero, one) - c1 / (1 + c1)),
    ]
    worst = max(errs)
    return SuiteResult("classical_metrics", worst <= 1e-9, f"max err {worst:.1e}")


def suite_attention(instances: int = 100) -> SuiteResult:
    rng = np.random.default_rng(3)
    worst_oracle = 0.0
    worst_rows = 0.0
    worst_perm = 0.0
    for _ in range(instances):
        n, N, f = rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 6)
        D = rng.normal(size=(N, f))
        WK = rng.normal(size=(f, f))
        WV = rng.normal(size=(f, f))
        Q = rng.normal(size=(n, f))
        out, A = kernels.sampler_attention(D, WK, WV, Q, return_weights=True)
        ref = naive_attention(Q.tolist(), (D @ WK).tolist(), (D @ WV).tolist())
        worst_oracle = max(worst_oracle, max_relative_error(out, ref, 1e-12))
        worst_rows = max(worst_rows, float(np.max(np.abs(A.sum(axis=1) - 1.0))))
        perm = rng.permutation(N)
        worst_perm = max(worst_perm, float(np.max(np.abs(
            kernels.sampler_attention(D[perm], WK, WV, Q) - out))))
    hand = kernels.sampler_attention([[1.0], [2.0]], [[1.0]], [[1.0]], [[1.0]])[0, 0]
    face = kernels.facial_attention([[1.0]], [[0.0], [math.log(3.0)]], [[0.0], [1.0]])[0, 0]
    D = rng.normal(size=(6, 4))
    V = D @ np.eye(4)
    zq = kernels.sampler_attention(D, np.eye(4), np.eye(4), np.zeros((3, 4)))
    zero_q = float(np.max(np.abs(zq - V.mean(axis=0))))
    big = kernels.softmax(np.array([[1e4, -1e4, 0.0]]))
    ok = (worst_oracle <= 1e-10 and worst_rows <= 1e-9 and worst_perm <= 1e-12
          and abs(hand - 1.7310585786300049) <= 1e-5 and abs(face - 0.75) <= 1e-12
          and zero_q <= 1e-12 and bool(np.all(np.isfinite(big))))
    detail = (f"oracle {worst_oracle:.1e}, rows {worst_rows:.1e}, perm {worst_perm:.1e}, "
              f"hand {hand:.5f}, zero-Q {zero_q:.1e}")
    return SuiteResult("attention", ok, detail)


def suite_gradient(instances: int = 100, grad_fn: Optional[Callable] = None) -> SuiteResult:
    grad_fn = grad_fn or kernels.masked_loss_grad
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(instances):
        eps = rng.normal(size=64)
        pred = rng.normal(size=64)
        m = (rng.random(64) < 0.5).astype(np.float64)
        lam = float(rng.uniform(1.0, 8.0))
        fd = finite_difference_grad(kernels.masked_loss, eps, pred, m, lam)
        worst = max(worst, max_relative_error(grad_fn(eps, pred, m, lam), fd))
    hand = grad_fn(np.array([1.0, 2.0]), np.zeros(2), np.array([0.0, 1.0]), 4.0)
    hand_err = float(np.max(np.abs(hand - np.array([-1.0, -8.0]))))
    ok = worst < 1e-4 and hand_err <= 1e-12
    return SuiteResult("loss_gradient", ok, f"max fd rel err {worst:.1e}, hand err {hand_err:.1e}")


def suite_loss() -> SuiteResult:
    rng = np.random.default_rng(9)
    hand = kernels.masked_loss([1.0, 2.0], [0.0, 0.0], [0.0, 1.0], 4.0)
    worst = 0.0
    for _ in range(50):
        eps = rng.normal(size=(4, 8))
        pred = rng.normal(size=(4, 8))
        m = (rng.random((4, 8)) < 0.3).astype(float)
        mse = float(np.mean((eps - pred) ** 2))
        worst = max(worst, abs(kernels.masked_loss(eps, pred, np.zeros_like(m), 3.0) - mse))
        worst = max(worst, abs(kernels.masked_loss(eps, pred, m, 1.0) - mse))
        _, fg = kernels.masked_loss_terms(eps, pred, m, 1.0)
        l1, l2 = kernels.masked_loss(eps, pred, m, 1.5), kernels.masked_loss(eps, pred, m, 6.0)
        worst = max(worst, abs((l2 - l1) - 4.5 * fg))
    ok = abs(hand - 8.5) <= 1e-12 and worst <= 1e-12
    return SuiteResult("masked_loss", ok, f"hand {hand}, max err {worst:.1e}")


def suite_layout() -> SuiteResult:
    cases = [
        (kernels.token_layout(8, 4, 2, 3, 5, "strict"), 17),
        (kernels.token_layout(8, 4, 2, 3, 0, "strict"), 12),
        (kernels.token_layout(49, 4, 1, 1, 0, "causal"), 13),
        (kernels.token_layout(7, 1, 3, 2, 4, "strict"), kernels.token_layout(7, 1, 3, 2, 4, "causal")),
    ]
    ok = all(a == b for a, b in cases)
    return SuiteResult("token_layout", ok, f"{sum(a == b for a, b in cases)}/{len(cases)} cases")


def suite_flo(fields: int = 100) -> SuiteResult:
    rng = np.random.default_rng(13)
    bad = 0
    for _ in range(fields):
        h, w = rng.integers(1, 12, size=2)
        f = FlowField(rng.normal(0, 50, (h, w)).astype(np.float32),
                      rng.normal(0, 50, (h, w)).astype(np.float32))
        g = read_flo(write_flo(f))
        if g.u.tobytes() != f.u.tobytes() or g.v.tobytes() != f.v.tobytes():
            bad += 1
    return SuiteResult("flo_roundtrip", bad == 0, f"{fields - bad}/{fields} bit-exact")


def suite_report() -> SuiteResult:
    rng = np.random.default_rng(17)
    report = MetricReport(metadata={"run_id": "selfcheck"})
    for T in range(1, 6):
        for mode in ("fullframe", "foreground"):
            report.set("dfci", float(rng.random() * 10), T, mode)
    report.set("silhouette", float(rng.random()), mode="foreground")
    report.set("l1", float(rng.random() * 1e-2))
    ok = True
    for fmt in ("json", "csv"):
        back = read_report(write_report(report, fmt), fmt)
        ok &= back.entries.keys() == report.entries.keys() and all(
            significant_equal(back.entries[k], v) for k, v in report.entries.items())
    ok &= write_report(report, "json") == write_report(report, "json")
    return SuiteResult("report_roundtrip", ok, "json+csv")


def _faulty_grad(eps, pred, m, lam):
    # foreground weight enters with the wrong sign
    g = kernels.masked_loss_grad(eps, pred, m, lam)
    return np.where(np.asarray(m) == 1.0, -g, g)


def run_self_check(fault: Optional[str] = None) -> list:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    grad_fn = _faulty_grad if fault == "lambda-sign" else None
    return [
        suite_dfci_oracle(),
        suite_dfci_analytic(),
        suite_dice(),
        suite_classical(),
        suite_attention(),
        suite_gradient(grad_fn=grad_fn),
        suite_loss(),
        suite_layout(),
        suite_flo(),
        suite_report(),
    ]


def format_results(results: list) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {'pass' if r.passed else 'FAIL'}  {r.detail}" for r in results]
    return "\n".join(lines)
