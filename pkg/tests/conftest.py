import numpy as np
import pytest

from lesionnet import data as D
from lesionnet import metrics as MT
from lesionnet import tensor as T
from lesionnet.tensor import Tensor

# Lines collected by test_acceptance.py, echoed after the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def rel_error(a, b, floor=1e-8):
    """Norm-wise relative difference, with an absolute floor for near-zero gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def gradient_errors(fn, inputs, seed=0):
    """Compare reverse-mode and central-difference gradients of a random readout.

    ``fn`` maps the input tensors to one output tensor; the scalar under test
    is ``sum(fn(*inputs) * R)`` for a fixed random ``R``.  Returns one
    relative error per input.
    """
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    readout = Tensor(np.random.default_rng(seed).normal(size=out.shape))
    loss = T.tsum(T.mul(out, readout))
    T.backward(loss)
    errors = []
    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            args = [Tensor(l.data) for l in leaves]
            args[i] = x
            return T.tsum(T.mul(fn(*args), readout))

        numeric = T.finite_difference_gradient(f, Tensor(leaf.data))
        errors.append(rel_error(leaf.grad, numeric.data))
    return errors


def write_image_manifest(root, per_class=6, size=16, seed=0):
    """Tiny on-disk dataset covering all seven classes, PNG and PPM mixed."""
    rng = np.random.default_rng(seed)
    (root / "img").mkdir(parents=True, exist_ok=True)
    records = []
    for k, label in enumerate(MT.CLASSES_7):
        for j in range(per_class):
            img = rng.uniform(0.0, 0.3, size=(3, size, size))
            img[k % 3] += 0.4 + 0.05 * (k // 3)
            rel = f"img/{label}_{j}.{'png' if j % 2 else 'ppm'}"
            D.write_image(np.clip(img, 0.0, 1.0), root / rel)
            records.append(D.Record(rel, label, D.SOURCES[j % 3]))
    manifest = D.validate_records(records)
    manifest.save(root / "manifest.csv")
    return root / "manifest.csv"


@pytest.fixture
def image_manifest(tmp_path):
    return write_image_manifest(tmp_path)


TINY_CONFIG = (
    "input_size=3x16x16\n"
    "stages=conv-stem:1:8:2,mbconv:1:8:2,transformer:1:8:2\n"
    "test_per_group=3\n"
    "epochs=2\n"
    "batch_size=8\n"
)
