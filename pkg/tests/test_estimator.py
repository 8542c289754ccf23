import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from partialseg import DualCompatibleSegmenter, SENTINEL


def _stacks(n_train=4, n_test=2, size=8, seed=0):
    """Raw image stacks with one bright blob each; train maps blob-only."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(n_train + n_test):
        img = rng.normal(0.0, 0.05, size=(size, size))
        top = int(rng.integers(1, size - 4))
        left = int(rng.integers(1, size - 4))
        blob = np.zeros((size, size), dtype=bool)
        blob[top : top + 3, left : left + 3] = True
        img[blob] += 1.0
        images.append(img)
        if i < n_train:
            labels.append(np.where(blob, 1, SENTINEL).astype(np.uint8))
        else:
            labels.append(blob.astype(np.uint8))
    X = np.stack(images[:n_train])
    y = np.stack(labels[:n_train])
    X_test = np.stack(images[n_train:])
    y_test = np.stack(labels[n_train:])
    return X, y, X_test, y_test


def _estimator(**kw):
    params = dict(
        stage1_epochs=3,
        stage2_max_steps=2,
        batch_size=4,
        depth=1,
        base_filters=4,
        lr_stage1=0.05,
        seed=0,
    )
    params.update(kw)
    return DualCompatibleSegmenter(**params)


class TestSklearnProtocol:
    def test_get_params_round_trip(self):
        est = _estimator(lambda_dual=0.3)
        params = est.get_params()
        assert params["lambda_dual"] == 0.3
        assert params["stage1_epochs"] == 3
        rebuilt = DualCompatibleSegmenter(**params)
        assert rebuilt.get_params() == params

    def test_clone_keeps_params_drops_state(self):
        X, y, _, _ = _stacks()
        est = _estimator().fit(X, y)
        assert hasattr(est, "model_")
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        assert not hasattr(twin, "model_")

    def test_set_params_chains(self):
        est = _estimator()
        assert est.set_params(seed=9).seed == 9

    def test_unfitted_predict_raises(self):
        with pytest.raises(NotFittedError):
            _estimator().predict(np.zeros((1, 8, 8)))


class TestFitPredict:
    def test_shapes_and_determinism(self):
        X, y, X_test, _ = _stacks()
        est = _estimator(use_dual=False).fit(X, y)
        assert est.n_classes_ == 2
        assert est.cond_classes_ == (1,)
        pred = est.predict(X_test)
        assert pred.shape == X_test.shape and pred.dtype == np.uint8
        assert set(np.unique(pred)) <= {0, 1}
        np.testing.assert_array_equal(pred, est.predict(X_test))

    def test_predict_proba(self):
        X, y, X_test, _ = _stacks()
        est = _estimator(use_dual=False).fit(X, y)
        proba = est.predict_proba(X_test)
        assert proba.shape == (2, 2, 8, 8)
        assert proba.min() >= 0.0 and proba.max() <= 1.0
        # hard labels are the argmax of the probability maps
        np.testing.assert_array_equal(proba.argmax(axis=1).astype(np.uint8), est.predict(X_test))

    def test_use_dual_runs_stage2(self):
        X, y, _, _ = _stacks()
        est = _estimator(use_dual=True).fit(X, y)
        assert est.state_.stage == 2
        est1 = _estimator(use_dual=False).fit(X, y)
        assert est1.state_.stage == 1

    def test_fit_seed_reproducible(self):
        X, y, X_test, _ = _stacks()
        a = _estimator(use_dual=False).fit(X, y).predict(X_test)
        b = _estimator(use_dual=False).fit(X, y).predict(X_test)
        np.testing.assert_array_equal(a, b)

    def test_score_learns_blob(self):
        X, y, X_test, y_test = _stacks()
        est = _estimator(use_dual=False, stage1_epochs=120, lr_stage1=0.01).fit(X, y)
        s = est.score(X_test, y_test)
        assert 0.0 <= s <= 1.0
        assert s > 0.6

    def test_num_classes_inferred_from_full_maps(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(3, 8, 8))
        y = rng.integers(0, 3, size=(3, 8, 8)).astype(np.uint8)
        est = _estimator(stage1_epochs=0, use_dual=False).fit(X, y)
        assert est.n_classes_ == 3
        # no 255 anywhere means every map counts as fully annotated
        assert all(lm.is_full for lm in est.dataset_.label_maps)


class TestValidation:
    def test_shape_checks(self):
        est = _estimator()
        with pytest.raises(ValueError, match="n_samples"):
            est.fit(np.zeros((8, 8)), np.zeros((8, 8)))
        with pytest.raises(ValueError, match="differ"):
            est.fit(np.zeros((2, 8, 8)), np.zeros((2, 4, 4), dtype=np.uint8))

    def test_annotated_classes_length(self):
        X, y, _, _ = _stacks()
        est = _estimator()
        with pytest.raises(ValueError, match="one class set per sample"):
            est.fit(X, y, annotated_classes=[{1}])

    def test_score_rejects_partial_reference(self):
        X, y, X_test, _ = _stacks()
        est = _estimator(use_dual=False).fit(X, y)
        bad = np.full_like(X_test, SENTINEL, dtype=np.uint8)
        with pytest.raises(ValueError, match="fully annotated"):
            est.score(X_test, bad)
