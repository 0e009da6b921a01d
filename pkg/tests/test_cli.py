import json
import os

import pytest

from main import EXIT_CONTRACT, EXIT_IO, run


def stage_lines(text):
    return [line for line in text.splitlines() if line.startswith("stage ")]


def run_json(capsys, argv):
    code = run(argv + ["--json"])
    return code, json.loads(capsys.readouterr().out)


class TestPlanCommand:
    def test_rf23_search(self, capsys):
        assert run(["plan", "--rf", "23", "--max-branches", "2"]) == 0
        out = capsys.readouterr().out
        ranked = [line for line in out.splitlines() if line.strip().startswith("1 ")]
        assert "(5,1) -> (7,3)" in ranked[0]

    def test_check_reports_violation(self, capsys):
        assert run(["plan", "--check", "5,1:7,6"]) == 0
        out = capsys.readouterr().out
        assert "violation [" in out.splitlines()[1]

    def test_check_legal_plan(self, capsys):
        code, payload = run_json(capsys, ["plan", "--check", "5,1:7,3"])
        assert code == 0
        assert payload["valid"] is True and payload["rf"] == [5, 23]

    def test_json_carries_config(self, capsys):
        code, payload = run_json(capsys, ["plan", "--rf", "11", "--max-branches", "2"])
        assert code == 0
        assert payload["config"]["rf"] == 11
        assert payload["results"][0]["rf"] == 11

    def test_missing_target(self, capsys):
        assert run(["plan"]) == EXIT_CONTRACT

    def test_unknown_flag(self, capsys):
        assert run(["plan", "--rf", "23", "--bogus"]) == EXIT_CONTRACT

    def test_bad_candidates(self, capsys):
        assert run(["plan", "--rf", "23", "--k", "3,five"]) == EXIT_IO
        assert run(["plan", "--rf", "23", "--k", "3,4"]) == EXIT_CONTRACT


class TestCostCommand:
    def test_comparison(self, capsys):
        code, payload = run_json(capsys, ["cost", "--compare"])
        assert code == 0
        rows = payload["comparison"]
        assert [row["rf"] for row in rows] == [23, 29]
        assert payload["notes"]

    def test_plan_ledger(self, capsys):
        assert run(["cost", "--plan", "5,1:7,3", "--branch-channels", "32"]) == 0
        total = [line for line in capsys.readouterr().out.splitlines() if line.startswith("total")]
        assert total[0].split()[1] == "11334"

    def test_preset_band(self, capsys):
        code, payload = run_json(capsys, ["cost", "--preset", "lsknet-t"])
        assert code == 0
        assert payload["cost"]["params_with_bias"] == 4_265_070
        assert payload["within_band"] is True


class TestForwardCommand:
    def test_reference_input_is_deterministic(self, capsys):
        argv = ["forward", "--preset", "lsknet-t", "--input", "zeros:1x3x64x64", "--seed", "0"]
        assert run(argv) == 0
        first = stage_lines(capsys.readouterr().out)
        assert run(argv) == 0
        second = stage_lines(capsys.readouterr().out)
        assert len(first) == 4 and first == second
        assert "(1, 32, 16, 16)" in first[0]

    def test_thread_count_does_not_change_output(self, capsys):
        argv = ["forward", "--preset", "tiny", "--input", "seed:3:normal:1x3x32x32"]
        assert run(argv + ["--threads", "1"]) == 0
        serial = stage_lines(capsys.readouterr().out)
        assert run(argv + ["--threads", "4"]) == 0
        assert stage_lines(capsys.readouterr().out) == serial

    def test_saved_weights_reload(self, capsys, tmp_path):
        out = str(tmp_path / "run")
        argv = ["forward", "--preset", "tiny", "--input", "seed:1:uniform:1x3x32x32"]
        assert run(argv + ["--seed", "5", "--out", out, "--save-weights"]) == 0
        saved = stage_lines(capsys.readouterr().out)
        assert os.path.exists(os.path.join(out, "stage4.lskt"))
        assert run(argv + ["--seed", "9", "--weights", os.path.join(out, "weights")]) == 0
        assert stage_lines(capsys.readouterr().out) == saved

    def test_input_not_multiple_of_32(self, capsys):
        assert run(["forward", "--preset", "tiny", "--input", "zeros:1x3x48x48"]) == EXIT_CONTRACT

    def test_missing_weights(self, capsys, tmp_path):
        argv = ["forward", "--preset", "tiny", "--input", "zeros:1x3x32x32", "--weights", str(tmp_path / "none")]
        assert run(argv) == EXIT_IO

    def test_missing_input_file(self, capsys, tmp_path):
        assert run(["forward", "--preset", "tiny", "--input", str(tmp_path / "x.lskt")]) == EXIT_IO


class TestGradcheckCommand:
    def test_dilated_conv_passes(self, capsys):
        assert run(["gradcheck", "--op", "conv2d", "--k", "3", "--d", "2"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_unknown_op(self, capsys):
        assert run(["gradcheck", "--op", "attention"]) == EXIT_CONTRACT


class TestPipeline:
    @pytest.fixture
    def traces(self, capsys, tmp_path):
        out = str(tmp_path / "traces")
        argv = ["export", "--preset", "tiny", "--input", "seed:0:normal:2x3x32x32", "--image-id", "img", "--out", out]
        assert run(argv) == 0
        assert "exported 16 selection maps for img_0, img_1" in capsys.readouterr().out
        return out

    @pytest.fixture
    def labels(self, tmp_path):
        # one category per image; mixed images are left out of the statistics
        directory = tmp_path / "labels"
        directory.mkdir()
        (directory / "img_0.txt").write_text("imagesource:GoogleEarth\ngsd:0.5\n4 4 20 4 20 20 4 20 plane 0\n")
        (directory / "img_1.txt").write_text("2 2 10 2 10 8 2 8 ship 1\n3 20 9 20 9 30 3 30 ship 0\n")
        return str(directory)

    def test_export_analyze_report(self, capsys, tmp_path, traces, labels):
        results = str(tmp_path / "results")
        assert run(["analyze", "--traces", traces, "--annotations", labels, "--out", results]) == 0
        capsys.readouterr()
        with open(os.path.join(results, "analysis.json")) as handle:
            analysis = json.load(handle)
        assert sorted(analysis["rf_ratio"]["ratios"]) == ["plane", "ship"]
        assert analysis["rf_ratio"]["image_counts"] == {"plane": 1, "ship": 1}
        assert analysis["images"] == 2
        assert sorted(analysis["selection"]) == ["plane", "ship"]
        assert len(analysis["selection"]["plane"]["ranking"]) == 4

        charts = str(tmp_path / "charts")
        code, payload = run_json(capsys, ["report", "--results", os.path.join(results, "analysis.json"), "--out", charts])
        assert code == 0
        assert os.path.exists(os.path.join(charts, "rf_ratio.svg"))
        assert os.path.exists(os.path.join(charts, "selection_plane.svg"))
        assert os.path.exists(os.path.join(charts, "selection_ship.svg"))
        assert [chart["bars"] for chart in payload["charts"]] == [2, 4, 4]

    def test_box_outside_image(self, capsys, tmp_path, traces):
        path = tmp_path / "img_0.txt"
        path.write_text("4 4 40 4 40 20 4 20 plane 0\n")
        assert run(["analyze", "--traces", traces, "--annotations", str(path)]) == EXIT_CONTRACT

    def test_path_like_category(self, capsys, tmp_path, traces):
        path = tmp_path / "img_0.txt"
        path.write_text("4 4 20 4 20 20 4 20 x/../../escaped 0\n")
        assert run(["analyze", "--traces", traces, "--annotations", str(path)]) == EXIT_IO

    def test_path_like_image_id(self, capsys, tmp_path):
        out = tmp_path / "traces"
        argv = ["export", "--preset", "tiny", "--input", "zeros:1x3x32x32", "--image-id", "../escaped", "--out", str(out)]
        assert run(argv) == EXIT_IO
        assert not (tmp_path / "escaped").exists()

    def test_export_needs_out(self, capsys):
        assert run(["export", "--preset", "tiny", "--input", "zeros:1x3x32x32"]) == EXIT_CONTRACT

    def test_analyze_missing_traces(self, capsys, tmp_path, labels):
        assert run(["analyze", "--traces", str(tmp_path / "none"), "--annotations", labels]) == EXIT_IO

    def test_report_rejects_bad_json(self, capsys, tmp_path):
        path = tmp_path / "analysis.json"
        path.write_text("{not json")
        assert run(["report", "--results", str(path), "--out", str(tmp_path / "charts")]) == EXIT_IO
