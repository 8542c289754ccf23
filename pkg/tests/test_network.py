import numpy as np
import pytest
import torch

from partialseg import (
    BackboneConfig,
    ConditionalPair,
    ConditionalSet,
    assemble_segmentation,
    build_model,
    clone_parameters,
    count_parameters,
    forward_prim,
    load_parameters,
    pack_inputs,
    parameter_drift,
    parameters_equal,
)


def _cond(size=16, soft=False):
    rng = np.random.default_rng(0)
    pairs = []
    for cid in (1, 2):
        mask = rng.random((size, size)).astype(np.float32) if soft else (rng.random((size, size)) < 0.5).astype(np.uint8)
        pairs.append(
            ConditionalPair(
                image=rng.normal(size=(size, size)).astype(np.float32),
                mask=mask,
                class_id=cid,
                pseudo=soft,
            )
        )
    return ConditionalSet(pairs=tuple(pairs))


class TestBackboneConfig:
    def test_channel_counts(self):
        cfg = BackboneConfig(num_classes=4, cond_classes=(1, 2, 3), image_size=(64, 64))
        assert cfg.in_channels == 7
        assert cfg.out_channels == 8

    def test_validation(self):
        with pytest.raises(ValueError, match="num_classes"):
            BackboneConfig(num_classes=1, cond_classes=(0,))
        with pytest.raises(ValueError, match="duplicate"):
            BackboneConfig(num_classes=3, cond_classes=(1, 1))
        with pytest.raises(ValueError, match="outside"):
            BackboneConfig(num_classes=3, cond_classes=(5,))
        with pytest.raises(ValueError, match="divisible"):
            BackboneConfig(num_classes=3, cond_classes=(1,), depth=4, image_size=(24, 24))
        with pytest.raises(ValueError, match="base_filters"):
            BackboneConfig(num_classes=3, cond_classes=(1,), base_filters=2)

    def test_json_round_trip(self):
        cfg = BackboneConfig(num_classes=4, cond_classes=(0, 1, 2, 3), depth=2, base_filters=8, image_size=(32, 32))
        assert BackboneConfig.from_json_dict(cfg.to_json_dict()) == cfg


class TestForward:
    def test_output_shape_and_range(self):
        cfg = BackboneConfig(num_classes=3, cond_classes=(1, 2), depth=2, base_filters=4, image_size=(16, 16))
        model = build_model(cfg, seed=0)
        x = torch.randn(2, cfg.in_channels, 16, 16)
        with torch.no_grad():
            y = model(x)
        assert y.shape == (2, 6, 16, 16)
        assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0

    def test_input_validation(self):
        cfg = BackboneConfig(num_classes=3, cond_classes=(1, 2), depth=2, base_filters=4, image_size=(16, 16))
        model = build_model(cfg, seed=0)
        with pytest.raises(ValueError, match="expected input"):
            model(torch.randn(2, 3, 16, 16))

    def test_forward_prim_single_sample(self):
        cfg = BackboneConfig(num_classes=3, cond_classes=(1, 2), depth=2, base_filters=4, image_size=(16, 16))
        model = build_model(cfg, seed=0)
        img = np.random.default_rng(1).normal(size=(16, 16)).astype(np.float32)
        y = forward_prim(model, img, _cond())
        assert y.shape == (6, 16, 16)


class TestPackInputs:
    def test_channel_layout(self):
        cond = _cond(size=8)
        img = np.random.default_rng(2).normal(size=(8, 8)).astype(np.float32)
        x = pack_inputs(img, cond)
        assert x.shape == (5, 8, 8)
        np.testing.assert_allclose(x[0].numpy(), img)
        np.testing.assert_allclose(x[1].numpy(), cond.pairs[0].image)
        np.testing.assert_allclose(x[2].numpy(), cond.pairs[0].binary_mask().astype(np.float32))
        np.testing.assert_allclose(x[3].numpy(), cond.pairs[1].image)

    def test_conditional_input_false_zeroes_cond(self):
        cond = _cond(size=8)
        img = np.random.default_rng(2).normal(size=(8, 8)).astype(np.float32)
        x = pack_inputs(img, cond, conditional_input=False)
        assert x.shape == (5, 8, 8)
        np.testing.assert_allclose(x[0].numpy(), img)
        assert not x[1:].any()

    def test_soft_mask_stays_live(self):
        # a pseudo mask tensor must receive gradients through the packed input
        size = 8
        rng = np.random.default_rng(3)
        soft = torch.rand(size, size, requires_grad=True)
        pair = ConditionalPair(image=rng.normal(size=(size, size)).astype(np.float32), mask=soft, class_id=1, pseudo=True)
        img = rng.normal(size=(size, size)).astype(np.float32)
        x = pack_inputs(img, ConditionalSet(pairs=(pair,)))
        x.sum().backward()
        assert soft.grad is not None
        np.testing.assert_allclose(soft.grad.numpy(), 1.0)


class TestAssembleSegmentation:
    def test_pair_sum_capped(self):
        pred = torch.tensor([[[0.7]], [[0.6]], [[0.1]], [[0.2]]])
        probs, labels = assemble_segmentation(pred, background_pair=True)
        assert probs.shape == (2, 1, 1) and labels.shape == (1, 1)
        assert float(probs[0]) == pytest.approx(1.0)
        assert float(probs[1]) == pytest.approx(0.3)
        assert int(labels[0, 0]) == 0

    def test_background_complement(self):
        # without a background slot, bg prob = 1 - max foreground
        pred = torch.tensor([[[0.0]], [[0.0]], [[0.2]], [[0.1]], [[0.5]], [[0.1]]])
        probs, labels = assemble_segmentation(pred, background_pair=False)
        assert float(probs[0]) == pytest.approx(1.0 - 0.6)
        assert float(probs[1]) == pytest.approx(0.3)
        assert float(probs[2]) == pytest.approx(0.6)
        assert int(labels[0, 0]) == 2

    def test_tie_resolves_to_lowest_index(self):
        pred = torch.tensor([[[0.4]], [[0.1]], [[0.5]], [[0.0]], [[0.3]], [[0.2]]])
        _, labels = assemble_segmentation(pred, background_pair=True)
        assert int(labels[0, 0]) == 0

    def test_batched_matches_single(self):
        pred = torch.rand(3, 8, 4, 4)
        probs_b, labels_b = assemble_segmentation(pred, background_pair=False)
        for i in range(3):
            probs_i, labels_i = assemble_segmentation(pred[i], background_pair=False)
            torch.testing.assert_close(probs_b[i], probs_i)
            torch.testing.assert_close(labels_b[i], labels_i)

    def test_odd_channels_rejected(self):
        with pytest.raises(ValueError, match="even"):
            assemble_segmentation(torch.rand(5, 4, 4), background_pair=True)


class TestParameterOps:
    def _model(self, seed):
        cfg = BackboneConfig(num_classes=2, cond_classes=(1,), depth=1, base_filters=4, image_size=(8, 8))
        return build_model(cfg, seed=seed)

    def test_build_model_seed_deterministic(self):
        a, b = self._model(5), self._model(5)
        assert parameters_equal(a, b)
        c = self._model(6)
        assert not parameters_equal(a, c)

    def test_clone_load_round_trip(self):
        a, b = self._model(5), self._model(6)
        load_parameters(b, clone_parameters(a))
        assert parameters_equal(a, b)
        assert parameter_drift(a, b) == 0.0

    def test_drift_tracks_max_change(self):
        a, b = self._model(5), self._model(5)
        with torch.no_grad():
            b.head.bias += 0.25
        assert parameter_drift(a, b) == pytest.approx(0.25)
        assert not parameters_equal(a, b)

    def test_drift_architecture_mismatch(self):
        cfg = BackboneConfig(num_classes=3, cond_classes=(1,), depth=1, base_filters=4, image_size=(8, 8))
        with pytest.raises(ValueError, match="architecture"):
            parameter_drift(self._model(0), build_model(cfg, seed=0))

    def test_count_parameters_regression(self):
        # frozen so silent architecture changes surface in review
        cfg = BackboneConfig(num_classes=4, cond_classes=(1, 2, 3), depth=3, base_filters=16, image_size=(64, 64))
        assert count_parameters(build_model(cfg, seed=0)) == 489400
