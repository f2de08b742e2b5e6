import json

import numpy as np
import pytest

from icon_sod import data, evaluate
from icon_sod.metrics import evaluate_pair


@pytest.fixture(scope="module")
def gt_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalset")
    index = data.synth_dataset(6, 32, seed=11, out_dir=root)
    return root / "masks", index


class TestEvaluateDirs:
    def test_gt_against_itself_is_perfect(self, gt_dir):
        masks, _ = gt_dir
        report, skipped = evaluate.evaluate_dirs(masks, masks)
        assert skipped == []
        agg = report.aggregate
        assert agg["n_images"] == 6
        assert agg["mae"] == 0.0
        assert agg["fnr"] == 0.0
        assert agg["wfm"] == 1.0
        assert agg["sm"] == 1.0

    def test_aggregate_is_mean_of_rows(self, gt_dir, tmp_path, rng):
        masks, index = gt_dir
        pred_dir = tmp_path / "preds"
        pred_dir.mkdir()
        for img_path, _ in index.pairs:
            noise = rng.random((32, 32))
            data.save_gray_png(noise, pred_dir / f"{img_path.stem}.png")
        report, _ = evaluate.evaluate_dirs(pred_dir, masks)
        for key in ("mae", "wfm", "sm", "em_mean", "fnr"):
            vals = [row[key] for row in report.per_image if row[key] is not None]
            assert report.aggregate[key] == pytest.approx(np.mean(vals), abs=1e-12)

    def test_worker_count_does_not_change_values(self, gt_dir, tmp_path, rng):
        masks, index = gt_dir
        pred_dir = tmp_path / "p2"
        pred_dir.mkdir()
        for img_path, _ in index.pairs:
            data.save_gray_png(rng.random((32, 32)), pred_dir / f"{img_path.stem}.png")
        r1, _ = evaluate.evaluate_dirs(pred_dir, masks, with_curves=True, workers=1)
        r2, _ = evaluate.evaluate_dirs(pred_dir, masks, with_curves=True, workers=4)
        assert r1.per_image == r2.per_image
        assert np.array_equal(r1.curves["fmeasure"], r2.curves["fmeasure"])

    def test_unmatched_stems_listed(self, gt_dir, tmp_path):
        masks, index = gt_dir
        pred_dir = tmp_path / "partial"
        pred_dir.mkdir()
        stems = [p.stem for p, _ in index.pairs]
        data.save_gray_png(np.zeros((32, 32)), pred_dir / f"{stems[0]}.png")
        data.save_gray_png(np.zeros((32, 32)), pred_dir / "stranger.png")
        report, skipped = evaluate.evaluate_dirs(pred_dir, masks)
        assert report.aggregate["n_images"] == 1
        assert any("stranger" in s for s in skipped)
        assert len(skipped) == 1 + (len(stems) - 1)

    def test_size_mismatch_skipped(self, gt_dir, tmp_path):
        masks, index = gt_dir
        pred_dir = tmp_path / "badsize"
        pred_dir.mkdir()
        stem = index.pairs[0][0].stem
        data.save_gray_png(np.zeros((16, 16)), pred_dir / f"{stem}.png")
        report, skipped = evaluate.evaluate_dirs(pred_dir, masks)
        assert report.aggregate["n_images"] == 0
        assert any("size mismatch" in s for s in skipped)

    def test_env_var_worker_count(self, monkeypatch):
        monkeypatch.setenv(evaluate.WORKERS_ENV, "3")
        assert evaluate.worker_count() == 3
        assert evaluate.worker_count(2) == 2
        monkeypatch.delenv(evaluate.WORKERS_ENV)
        assert evaluate.worker_count() == 1


class TestReportWriters:
    def test_report_files_and_schema(self, gt_dir, tmp_path):
        masks, _ = gt_dir
        report, _ = evaluate.evaluate_dirs(masks, masks, with_curves=True)
        written = evaluate.write_report(report, tmp_path / "out")
        payload = json.loads(written["json"].read_text())
        assert payload["schema"] == "icon-sod-report-v1"
        assert set(payload["aggregate"]) == {
            "mae", "wfm", "sm", "em_mean", "fnr", "n_images", "n_fnr_defined",
        }
        row = payload["per_image"][0]
        assert set(row) == {"name", "mae", "wfm", "sm", "em_mean", "fnr", "empty_gt"}
        header = written["csv"].read_text().splitlines()[0]
        assert header == "name,mae,wfm,sm,em_mean,fnr,empty_gt"
        curves_header = written["curves"].read_text().splitlines()[0]
        assert curves_header == "threshold,precision,recall,fmeasure"
        assert written["pr_figure"].exists()
        assert written["f_figure"].exists()

    def test_report_bytes_deterministic(self, gt_dir, tmp_path):
        masks, _ = gt_dir
        report, _ = evaluate.evaluate_dirs(masks, masks)
        w1 = evaluate.write_report(report, tmp_path / "r1", render_figures=False)
        w2 = evaluate.write_report(report, tmp_path / "r2", render_figures=False)
        assert w1["json"].read_bytes() == w2["json"].read_bytes()
        assert w1["csv"].read_bytes() == w2["csv"].read_bytes()

    def test_fnr_percent_formatting(self):
        assert evaluate.format_fnr_percent(0.03456) == "3.46%"
        assert evaluate.format_fnr_percent(None) == "undefined"

    def test_curves_average_across_images(self, gt_dir, tmp_path, rng):
        masks, index = gt_dir
        pred_dir = tmp_path / "avg"
        pred_dir.mkdir()
        preds = {}
        for img_path, mask_path in index.pairs:
            p = rng.random((32, 32))
            preds[img_path.stem] = p
            data.save_gray_png(p, pred_dir / f"{img_path.stem}.png")
        report, _ = evaluate.evaluate_dirs(pred_dir, masks, with_curves=True)
        rows = []
        for img_path, mask_path in index.pairs:
            pred = data.load_mask(pred_dir / f"{img_path.stem}.png") / 255.0
            gt = (data.load_mask(mask_path) >= 128).astype(np.float64)
            rows.append(evaluate_pair(pred, gt, with_curves=True)["curves"]["fmeasure"])
        assert np.allclose(report.curves["fmeasure"], np.mean(rows, axis=0), atol=1e-12)
