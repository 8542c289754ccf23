import json

import numpy as np
import pytest

from conftest import TinyPixelNet

from partialseg import EVAL_SEED, dice, evaluate, init_state, predict_sample
from partialseg.trainer import TrainConfig


def _pixel_count_oracle(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    inter = int((a & b).sum())
    na, nb = int(a.sum()), int(b.sum())
    return 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)


class TestDice:
    def test_matches_pixel_count_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            shape = (int(rng.integers(1, 12)), int(rng.integers(1, 12)))
            a = rng.random(shape) < rng.random()
            b = rng.random(shape) < rng.random()
            assert dice(a, b) == _pixel_count_oracle(a, b)

    def test_known_values(self):
        a = np.array([[1, 1], [0, 0]], dtype=bool)
        b = np.array([[1, 0], [1, 0]], dtype=bool)
        assert dice(a, b) == pytest.approx(0.5)
        assert dice(a, a) == 1.0
        assert dice(a, ~a) == 0.0

    def test_both_empty_scores_one(self):
        z = np.zeros((4, 4), dtype=bool)
        assert dice(z, z) == 1.0

    def test_one_empty_scores_zero(self):
        z = np.zeros((4, 4), dtype=bool)
        f = np.ones((4, 4), dtype=bool)
        assert dice(z, f) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a = rng.random((6, 6)) < 0.3
        b = rng.random((6, 6)) < 0.7
        assert dice(a, b) == dice(b, a)

    def test_accepts_01_ints(self):
        a = np.array([[1, 0]], dtype=np.uint8)
        b = np.array([[1, 1]], dtype=np.uint8)
        assert dice(a, b) == pytest.approx(2 / 3)

    def test_validation(self):
        with pytest.raises(ValueError, match="shapes"):
            dice(np.zeros((2, 2), dtype=bool), np.zeros((3, 3), dtype=bool))
        with pytest.raises(ValueError, match="not binary"):
            dice(np.array([[2]]), np.array([[1]]))


def _fitted_state(micro_dataset):
    cfg = TrainConfig(batch_size=4, stage1_epochs=0, seed=0, depth=1, base_filters=4)
    return init_state(micro_dataset, cfg, TinyPixelNet)


class TestPredictSample:
    def test_shapes_and_determinism(self, micro_dataset):
        state = _fitted_state(micro_dataset)
        probs, labels = predict_sample(state.model, micro_dataset, 4, state.cond_classes)
        assert probs.shape == (2, 8, 8)
        assert labels.shape == (8, 8) and labels.dtype == np.uint8
        probs2, labels2 = predict_sample(state.model, micro_dataset, 4, state.cond_classes)
        np.testing.assert_array_equal(probs, probs2)
        np.testing.assert_array_equal(labels, labels2)

    def test_seed_controls_conditional_draw(self, micro_dataset):
        state = _fitted_state(micro_dataset)
        a, _ = predict_sample(state.model, micro_dataset, 4, state.cond_classes, eval_seed=1)
        b, _ = predict_sample(state.model, micro_dataset, 4, state.cond_classes, eval_seed=1)
        np.testing.assert_array_equal(a, b)


class TestEvaluate:
    def test_report_fields(self, micro_dataset):
        state = _fitted_state(micro_dataset)
        report = evaluate(state.model, micro_dataset, split="test", checkpoint="ckpt.pt")
        assert report.n_samples == 2
        assert report.seed == EVAL_SEED
        assert report.checkpoint == "ckpt.pt"
        assert set(report.per_class) == {"blob"}
        stats = report.per_class["blob"]
        assert 0.0 <= stats["mean"] <= 1.0 and stats["std"] >= 0.0
        assert report.mean_dice == pytest.approx(stats["mean"])
        assert len(report.per_sample) == 2
        for row in report.per_sample:
            assert set(row) == {"sample_id", "blob"}

    def test_per_sample_mean_consistency(self, micro_dataset):
        state = _fitted_state(micro_dataset)
        report = evaluate(state.model, micro_dataset, split="test")
        manual = np.mean([row["blob"] for row in report.per_sample])
        assert report.per_class["blob"]["mean"] == pytest.approx(float(manual))

    def test_empty_split_rejected(self, micro_dataset):
        state = _fitted_state(micro_dataset)
        with pytest.raises(ValueError, match="empty"):
            evaluate(state.model, micro_dataset, split="val")

    def test_partial_gt_rejected(self, micro_dataset):
        state = _fitted_state(micro_dataset)
        with pytest.raises(ValueError, match="full annotation"):
            evaluate(state.model, micro_dataset, split="train")

    def test_save_round_trip(self, micro_dataset, tmp_path):
        state = _fitted_state(micro_dataset)
        report = evaluate(state.model, micro_dataset, split="test")
        path = report.save(tmp_path)
        payload = json.loads(path.read_text())
        assert payload["mean_dice"] == report.mean_dice
        assert payload["n_samples"] == 2
        assert "per_sample" not in payload
        csv_lines = (tmp_path / "per_sample.csv").read_text().splitlines()
        assert csv_lines[0] == "sample_id,dice_blob"
        assert len(csv_lines) == 3
        sid, val = csv_lines[1].split(",")
        assert sid == report.per_sample[0]["sample_id"]
        assert float(val) == report.per_sample[0]["blob"]
