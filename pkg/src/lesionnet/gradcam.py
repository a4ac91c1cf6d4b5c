"""Grad-CAM relevance maps from the last MBConv block, plus PNG overlays."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import resize_bilinear, write_png
from .errors import LabelIndexError, StructureError
from .model import Model

# Blue -> cyan -> yellow -> red, sampled linearly.
RAMP = np.array(
    [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ]
)


@dataclass
class GradCamMap:
    heatmap: np.ndarray  # [h, w], values in [0, 1]
    target: int
    layer: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        for (r, c), v in np.ndenumerate(self.heatmap):
            w.writerow([r, c, repr(float(v))])
        return buf.getvalue()

    def mass_center(self) -> tuple:
        """Relevance-weighted centre in normalized (row, col) coordinates."""
        h, w = self.heatmap.shape
        total = self.heatmap.sum()
        if total == 0:
            return (0.5, 0.5)
        rows = (np.arange(h) + 0.5) / h
        cols = (np.arange(w) + 0.5) / w
        return (
            float((self.heatmap.sum(axis=1) * rows).sum() / total),
            float((self.heatmap.sum(axis=0) * cols).sum() / total),
        )


def compute_gradcam(model: Model, image: np.ndarray, target: int) -> GradCamMap:
    if model.hook_name is None:
        raise StructureError("model has no convolutional block to explain")
    k = model.config.num_classes
    if not 0 <= target < k:
        raise LabelIndexError(f"target class {target} outside [0, {k})")
    x = np.asarray(image, dtype=np.float64)
    logits = model.forward(x[None] if x.ndim == 3 else x, training=False, record=True)
    feats = model.features
    if feats is None:
        raise StructureError(f"hook {model.hook_name!r} captured nothing")
    onehot = np.zeros(logits.shape)
    onehot[0, target] = 1.0
    score = T.tsum(T.mul(logits, T.Tensor(onehot)))
    feats.grad = None
    T.backward(score)
    acts = feats.data[0]
    grads = feats.grad[0]
    alpha = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, acts, axes=1), 0.0)
    top = cam.max()
    if top > 0:
        cam = cam / top
    # Leave no stale gradients on the parameters.
    model.zero_grad()
    return GradCamMap(cam, target, model.hook_name)


def colorize(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] through the ramp; returns ``[3, H, W]``."""
    v = np.clip(values, 0.0, 1.0) * (len(RAMP) - 1)
    lo = np.minimum(np.floor(v).astype(int), len(RAMP) - 2)
    f = (v - lo)[..., None]
    rgb = RAMP[lo] * (1 - f) + RAMP[lo + 1] * f
    return rgb.transpose(2, 0, 1)


def overlay(cam: GradCamMap, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    _, h, w = image.shape
    up = resize_bilinear(cam.heatmap[None], h, w)[0]
    return np.clip((1 - alpha) * image + alpha * colorize(up), 0.0, 1.0)


def render_overlay(cam: GradCamMap, image: np.ndarray, path) -> None:
    write_png(overlay(cam, image), path)
