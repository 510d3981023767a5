import json
import shutil

import numpy as np
import pytest

from dfcikit.cli import EXIT_OK, EXIT_SELFCHECK, EXIT_VALIDATION, main
from dfcikit.media_io import load_flo, read_report, save_flo, flow_filename, FlowField
from dfcikit.media_io import save_frame_sequence
from dfcikit.synthetic import translating_video

FAST = ["--iterations", "30"]


@pytest.fixture
def frames3(tmp_path):
    save_frame_sequence(translating_video(24, 24, 3, 1, 0), tmp_path / "f3")
    return tmp_path / "f3"


class TestFlowCommand:
    def test_writes_one_file_per_pair(self, frames3, tmp_path):
        out = tmp_path / "flows"
        assert main(["flow", "--frames", str(frames3), "--horizons", "1", "--out", str(out)]) == 0
        assert sorted(p.name for p in out.iterdir()) == ["flow_T1_00001.flo", "flow_T1_00002.flo"]
        f = load_flo(out / "flow_T1_00001.flo")
        assert f.shape == (24, 24)

    def test_multiple_horizons(self, frames3, tmp_path):
        out = tmp_path / "flows"
        assert main(["flow", "--frames", str(frames3), "--horizons", "1,2", "--out", str(out)]) == 0
        assert len(list(out.iterdir())) == 3

    def test_horizon_exceeds_sequence(self, tmp_path, caplog):
        save_frame_sequence(translating_video(24, 24, 4, 1, 0), tmp_path / "f4")
        rc = main(["flow", "--frames", str(tmp_path / "f4"), "--horizons", "5",
                   "--out", str(tmp_path / "o")])
        assert rc == EXIT_VALIDATION
        assert "horizon exceeds sequence" in caplog.text
        assert not (tmp_path / "o").exists()

    def test_rerun_is_byte_identical(self, frames3, tmp_path):
        out = tmp_path / "flows"
        args = ["flow", "--frames", str(frames3), "--out", str(out)] + FAST
        main(args)
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        main(args)
        assert first == {p.name: p.read_bytes() for p in out.iterdir()}

    def test_unreadable_frames(self, tmp_path):
        assert main(["flow", "--frames", str(tmp_path / "missing"), "--out",
                     str(tmp_path / "o")]) == EXIT_VALIDATION


def report_args(d, out, *extra):
    return ["report", "--gt", str(d / "gt"), "--gen", str(d / "gen"),
            "--masks-gt", str(d / "mgt"), "--masks-gen", str(d / "mgen"),
            "--out", str(out)] + FAST + list(extra)


class TestReportCommand:
    def test_self_comparison(self, scene_dirs, tmp_path):
        out = tmp_path / "r.json"
        args = ["report", "--gt", str(scene_dirs / "gt"), "--gen", str(scene_dirs / "gt"),
                "--masks-gt", str(scene_dirs / "mgt"), "--masks-gen", str(scene_dirs / "mgt"),
                "--out", str(out)] + FAST
        assert main(args) == EXIT_OK
        r = read_report(out.read_bytes())
        dfci = {k: v for k, v in r.entries.items() if k[0] == "dfci"}
        assert len(dfci) == 10 and all(v == 0.0 for v in dfci.values())
        assert r.get("silhouette", mode="foreground") == 1.0
        assert r.get("l1") == 0.0
        assert r.get("psnr") == 100.0
        assert r.get("psnr_masked", mode="foreground") == 100.0
        assert r.get("ssim") == pytest.approx(1.0, abs=1e-12)

    def test_metadata_records_parameters(self, scene_dirs, tmp_path):
        out = tmp_path / "r.json"
        assert main(report_args(scene_dirs, out, "--run-id", "demo")) == EXIT_OK
        meta = json.loads(out.read_text())["metadata"]
        assert meta["run_id"] == "demo"
        assert meta["flow_params"]["smoothness_alpha"] == 15.0
        assert meta["flow_params"]["iterations_per_level"] == 30
        assert meta["flow_params"]["pyramid_levels"] == 2
        assert meta["conventions"]["psnr_cap_db"] == 100.0
        assert meta["mask_threshold"] == 128
        assert meta["dfci_valid_pairs"]["foreground_T1"] == 5

    def test_csv_output(self, scene_dirs, tmp_path):
        out = tmp_path / "r.csv"
        assert main(report_args(scene_dirs, out, "--format", "csv")) == EXIT_OK
        header, row = out.read_text().strip().split("\n")
        assert header.split(",")[1] == "dfci_fg_T1"
        assert len(row.split(",")) == len(header.split(","))

    def test_missing_mask_file_fails_fast(self, scene_dirs, tmp_path):
        d = tmp_path / "copy"
        shutil.copytree(scene_dirs, d)
        (d / "mgen" / "00005.pgm").unlink()
        out = tmp_path / "r.json"
        assert main(report_args(d, out)) == EXIT_VALIDATION
        assert not out.exists()

    def test_gap_in_generated_frames(self, scene_dirs, tmp_path):
        d = tmp_path / "copy"
        shutil.copytree(scene_dirs, d)
        (d / "gen" / "00002.ppm").unlink()
        out = tmp_path / "r.json"
        assert main(report_args(d, out)) == EXIT_VALIDATION
        assert not out.exists()

    def test_threads_do_not_change_output(self, scene_dirs, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(report_args(scene_dirs, a, "--threads", "1")) == EXIT_OK
        assert main(report_args(scene_dirs, b, "--threads", "8")) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_foreground_without_masks(self, scene_dirs, tmp_path):
        args = ["report", "--gt", str(scene_dirs / "gt"), "--gen", str(scene_dirs / "gen"),
                "--out", str(tmp_path / "r.json")]
        assert main(args) == EXIT_VALIDATION
        assert main(args + ["--mode", "fullframe"] + FAST) == EXIT_OK
        r = read_report((tmp_path / "r.json").read_bytes())
        assert ("silhouette", None, "foreground") not in r.entries

    def test_imported_flows(self, scene_dirs, tmp_path):
        for name, u in (("fa", 1.0), ("fb", 2.0)):
            (tmp_path / name).mkdir()
            for t in range(1, 6):
                save_flo(tmp_path / name / flow_filename(1, t),
                         FlowField(np.full((32, 32), u), np.zeros((32, 32))))
        out = tmp_path / "r.json"
        rc = main(report_args(scene_dirs, out, "--flow", "imported", "--horizons", "1",
                              "--flows-gt", str(tmp_path / "fa"), "--flows-gen", str(tmp_path / "fb")))
        assert rc == EXIT_OK
        r = read_report(out.read_bytes())
        assert r.get("dfci", 1, "fullframe") == 0.5
        assert r.get("dfci", 1, "foreground") == 0.5

    def test_imported_missing_flow(self, scene_dirs, tmp_path):
        (tmp_path / "fa").mkdir()
        out = tmp_path / "r.json"
        rc = main(report_args(scene_dirs, out, "--flow", "imported", "--horizons", "1",
                              "--flows-gt", str(tmp_path / "fa"), "--flows-gen", str(tmp_path / "fa")))
        assert rc == EXIT_VALIDATION and not out.exists()

    def test_spec_file_batch(self, scene_dirs, tmp_path):
        runs = [
            {"gt": str(scene_dirs / "gt"), "gen": str(scene_dirs / g),
             "masks_gt": str(scene_dirs / "mgt"), "masks_gen": str(scene_dirs / "mgen"),
             "horizons": [1, 2], "out": str(tmp_path / f"{g}.json"), "run_id": g,
             "flow_params": {"iterations_per_level": 20}}
            for g in ("gt", "gen")
        ]
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"runs": runs}))
        assert main(["report", "--spec", str(spec)]) == EXIT_OK
        same = read_report((tmp_path / "gt.json").read_bytes())
        assert same.get("dfci", 2, "fullframe") == 0.0
        other = read_report((tmp_path / "gen.json").read_bytes())
        assert other.get("dfci", 2, "fullframe") > 0.0

    def test_spec_file_fails_fast_across_runs(self, scene_dirs, tmp_path):
        runs = [
            {"gt": str(scene_dirs / "gt"), "gen": str(scene_dirs / "gen"), "mode": "fullframe",
             "out": str(tmp_path / "ok.json")},
            {"gt": str(scene_dirs / "gt"), "gen": str(tmp_path / "nowhere"),
             "out": str(tmp_path / "bad.json")},
        ]
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps(runs))
        assert main(["report", "--spec", str(spec)]) == EXIT_VALIDATION
        assert not (tmp_path / "ok.json").exists()

    def test_stdout(self, scene_dirs, capsysbinary):
        args = ["report", "--gt", str(scene_dirs / "gt"), "--gen", str(scene_dirs / "gt"),
                "--mode", "fullframe", "--horizons", "1"] + FAST
        assert main(args) == EXIT_OK
        doc = json.loads(capsysbinary.readouterr().out)
        assert doc["entries"][0]["metric"] == "dfci"


class TestSelfCheck:
    def test_passes(self, capsys):
        assert main(["self-check"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert out.count("pass") >= 10

    def test_injected_fault_fails_gradient_suite(self, capsys):
        assert main(["self-check", "--inject-fault", "lambda-sign"]) == EXIT_SELFCHECK
        lines = capsys.readouterr().out.splitlines()
        failed = [ln.split()[0] for ln in lines if "FAIL" in ln]
        assert failed == ["loss_gradient"]

    def test_deterministic(self, capsys):
        main(["self-check"])
        first = capsys.readouterr().out
        main(["self-check"])
        assert capsys.readouterr().out == first
