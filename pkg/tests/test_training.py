import math

import numpy as np
import pytest

from lesionnet import data as D
from lesionnet import metrics as MT
from lesionnet import model as M
from lesionnet import tensor as T
from lesionnet import training as TR
from lesionnet.errors import ConfigError, DivergenceError, EmptyDatasetError, LabelIndexError, ShapeError
from lesionnet.model import ModelConfig
from lesionnet.tensor import Tensor

from conftest import gradient_errors

TINY = ModelConfig(
    input_size=(3, 8, 8), stages=M.parse_stages("conv-stem:1:4:2,mbconv:1:4:1,transformer:1:4:2"), num_classes=2, seed=0
)


class TestCrossEntropy:
    def test_uniform(self):
        assert TR.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_confident(self):
        assert TR.cross_entropy(Tensor([[800.0, 0.0]]), [0]).item() == 0.0

    def test_closed_form(self):
        assert TR.cross_entropy(Tensor([[1.0, 0.0]]), [1]).item() == pytest.approx(math.log(1 + math.e), abs=1e-15)

    def test_weights_and_mean(self):
        logits = Tensor([[0.0, 0.0], [1.0, 0.0]])
        loss = TR.cross_entropy(logits, [0, 1], class_weights=np.array([2.0, 0.5])).item()
        assert loss == pytest.approx((2 * math.log(2) + 0.5 * math.log(1 + math.e)) / 2, abs=1e-15)

    def test_label_range(self):
        with pytest.raises(LabelIndexError):
            TR.cross_entropy(Tensor([[0.0, 0.0]]), [2])

    def test_shape(self):
        with pytest.raises(ShapeError):
            TR.cross_entropy(Tensor([0.0, 0.0]), [0])

    def test_gradient(self):
        z = np.random.default_rng(0).uniform(-2, 2, (4, 3))
        fn = lambda t: TR.cross_entropy(t, [0, 2, 1, 2], np.array([0.5, 1.0, 2.0]))
        assert max(gradient_errors(fn, [z])) <= 1e-5

    def test_inverse_frequency(self):
        w = TR.inverse_frequency_weights([0, 0, 0, 1], 3)
        assert w.tolist() == [4 / 6, 2.0, 0.0]


class TestSGD:
    def _step(self, p, g, state=None, **kw):
        params = {"w": Tensor(np.array(p, dtype=float))}
        state = {} if state is None else state
        TR.sgd_step(params, {"w": np.array(g, dtype=float)}, state, **kw)
        return params["w"].data.tolist(), state

    def test_fixed_point(self):
        assert self._step([1.5, -2.0], [0.0, 0.0], lr=0.3, momentum=0.9)[0] == [1.5, -2.0]

    def test_plain_step(self):
        assert self._step([1.0], [1.0], lr=0.1)[0] == pytest.approx([0.9])

    def test_momentum_recurrence(self):
        params = {"w": Tensor([0.0])}
        state = {}
        seen = []
        for _ in range(2):
            TR.sgd_step(params, {"w": np.array([1.0])}, state, lr=0.1, momentum=0.9)
            seen.append(params["w"].item())
        assert seen == pytest.approx([-0.1, -0.29], abs=1e-15)

    def test_weight_decay(self):
        assert self._step([2.0], [0.0], lr=0.5, weight_decay=0.1)[0] == pytest.approx([1.9])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            self._step([1.0, 2.0], [1.0], lr=0.1)

    def test_descent_on_quadratic(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(5, 5))
        q = a @ a.T + np.eye(5)
        w = Tensor(rng.normal(size=(5, 1)), requires_grad=True)
        loss = lambda: T.tsum(T.mul(w, T.matmul(Tensor(q), w)))
        before = loss()
        T.backward(before)
        TR.sgd_step({"w": w}, {"w": w.grad}, {}, lr=1e-3)
        assert loss().item() < before.item()


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"learning_rate": 0}, {"momentum": 1.0}, {"epochs": 0}, {"batch_size": 0}, {"class_weighting": "focal"}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TR.TrainConfig(**kwargs).validate()


def _quadrants(n, seed, split="train"):
    return [
        D.Sample(D.quadrant_image(s.label, np.random.default_rng([seed, i]), size=8, patch=2), s.label, split, i)
        for i, s in enumerate(D.quadrant_samples(n, seed))
    ]


class TestFit:
    def test_single_epoch_log(self):
        result = TR.fit(M.build_model(TINY), _quadrants(4, 0), [], TR.TrainConfig(epochs=1, batch_size=4))
        assert len(result.log) == 1
        assert result.best_epoch == 1
        assert result.log_csv().splitlines()[0] == ",".join(TR.LOG_COLUMNS)

    def test_deterministic(self):
        cfg = TR.TrainConfig(epochs=3, batch_size=4, seed=5, augment=D.AugmentationConfig(seed=5))
        runs = [TR.fit(M.build_model(TINY), _quadrants(8, 0), _quadrants(4, 1, "val"), cfg) for _ in range(2)]
        assert runs[0].log_csv() == runs[1].log_csv()
        assert runs[0].best_checkpoint == runs[1].best_checkpoint

    def test_checkpoint_file(self, tmp_path):
        path = tmp_path / "best.catn"
        cfg = TR.TrainConfig(epochs=2, batch_size=4, checkpoint_path=str(path))
        result = TR.fit(M.build_model(TINY), _quadrants(8, 0), _quadrants(4, 1, "val"), cfg)
        assert path.read_bytes() == result.best_checkpoint
        _, meta = M.load_checkpoint(path, with_meta=True)
        assert meta["epoch"] == result.best_epoch

    def test_validation_untouched(self):
        val = _quadrants(4, 1, "val")
        before = [s.image.copy() for s in val]
        TR.fit(M.build_model(TINY), _quadrants(8, 0), val, TR.TrainConfig(epochs=1, augment=D.AugmentationConfig()))
        assert all(np.array_equal(a, s.image) for a, s in zip(before, val))

    def test_callback_stops(self):
        result = TR.fit(
            M.build_model(TINY), _quadrants(4, 0), [], TR.TrainConfig(epochs=10), on_epoch=lambda e: e.epoch == 2
        )
        assert len(result.log) == 2

    def test_divergence(self):
        samples = _quadrants(4, 0)
        samples[0].image[:] = np.nan
        with pytest.raises(DivergenceError):
            TR.fit(M.build_model(TINY), samples, [], TR.TrainConfig(epochs=1))

    def test_empty(self):
        with pytest.raises(EmptyDatasetError):
            TR.fit(M.build_model(TINY), [], [], TR.TrainConfig())

    def test_initial_loss_near_log_k(self):
        cfg = ModelConfig(seed=3)
        model = M.build_model(cfg)
        x = np.random.default_rng(0).uniform(size=(16, 3, 32, 32))
        loss = TR.cross_entropy(model.forward(x, training=True), np.arange(16) % 7).item()
        assert abs(loss - math.log(7)) <= 0.2 * math.log(7)


class _LookupModel:
    """Stand-in model: logits are read from the first pixel of each image."""

    def __init__(self, k):
        self.k = k

    def forward(self, images):
        idx = images[:, 0, 0, 0].astype(int)
        return Tensor(np.eye(self.k)[idx] * 5.0)


def _batches(labels, pred):
    samples = [D.Sample(np.full((1, 1, 1), p, dtype=float), y, "test", i) for i, (y, p) in enumerate(zip(labels, pred))]
    return D.make_batches(samples, 3)


class TestEvaluate:
    def test_perfect(self):
        labels = [0, 1, 2, 3, 4, 5, 6, 4, 5]
        ev = TR.evaluate(_LookupModel(7), _batches(labels, labels), MT.CLASSES_7)
        assert np.array_equal(ev.confusion.counts, np.diag(np.bincount(labels, minlength=7)))
        assert all(r.precision == 1 and r.recall == 1 for r in ev.report.rows)

    def test_constant_predictor(self):
        labels = [0, 1, 2, 3, 4, 5, 6]
        ev = TR.evaluate(_LookupModel(7), _batches(labels, [4] * 7), MT.CLASSES_7)
        recalls = [r.recall for r in ev.report.rows]
        assert recalls == [0, 0, 0, 0, 1, 0, 0]

    def test_decomposition(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 7, 20).tolist()
        pred = rng.integers(0, 7, 20).tolist()
        ev = TR.evaluate(_LookupModel(7), _batches(labels, pred), MT.CLASSES_7)
        probs = T.softmax_array(np.eye(7)[pred] * 5.0, 1)
        true = [MT.CLASSES_7[i] for i in labels]
        cm = MT.confusion_matrix(true, [MT.CLASSES_7[i] for i in pred], MT.CLASSES_7)
        rep, _ = MT.build_report(cm, probs, true)
        assert ev.report.to_csv() == rep.to_csv()

    def test_map3(self):
        labels = [0, 1, 2, 3, 4, 5, 6]
        pred = [1, 0, 3, 2, 4, 4, 6]
        ev = TR.evaluate(_LookupModel(7), _batches(labels, pred), MT.CLASSES_7, map3=True)
        assert ev.confusion.classes == MT.CLASSES_3
        # melanoma row: the melanoma image is right; one nevus is called melanoma.
        assert ev.confusion.counts.tolist() == [[1, 0, 0], [0, 2, 0], [1, 0, 3]]
        assert np.allclose(ev.probabilities.sum(axis=1), 1.0)

    def test_empty(self):
        with pytest.raises(EmptyDatasetError):
            TR.evaluate(_LookupModel(7), [], MT.CLASSES_7)
