import numpy as np
import pytest

from lesionnet import data as D
from lesionnet import gradcam as G
from lesionnet import model as M
from lesionnet.errors import LabelIndexError, StructureError
from lesionnet.model import ModelConfig

CONV_ONLY = ModelConfig(
    input_size=(3, 8, 8), stages=M.parse_stages("conv-stem:1:4:1,mbconv:1:6:2"), num_classes=3, seed=2
)
HYBRID = ModelConfig(
    input_size=(3, 8, 8), stages=M.parse_stages("conv-stem:1:4:1,mbconv:1:4:2,transformer:1:4:2"), num_classes=3, seed=4
)


def _image(seed=0, size=8):
    return np.random.default_rng(seed).uniform(size=(3, size, size))


class TestCompute:
    def test_zero_head(self):
        model = M.build_model(HYBRID)
        model.head_weight.data[:] = 0
        cam = G.compute_gradcam(model, _image(), 1)
        assert not cam.heatmap.any()

    def test_single_channel_head(self):
        model = M.build_model(CONV_ONLY)
        model.head_weight.data[:] = 0
        model.head_weight.data[2, 3] = 1.5
        img = _image(1)
        cam = G.compute_gradcam(model, img, 2)
        model.forward(img[None])
        a = np.maximum(model.features.data[0, 3], 0)
        assert np.allclose(cam.heatmap, a / a.max(), atol=1e-12)

    def test_shape_and_layer(self):
        model = M.build_model(HYBRID)
        cam = G.compute_gradcam(model, _image(), 0)
        assert cam.heatmap.shape == (4, 4)
        assert cam.layer == "stage1.block0"
        assert cam.target == 0

    def test_range(self):
        for k in range(3):
            cam = G.compute_gradcam(M.build_model(HYBRID), _image(k), k)
            h = cam.heatmap
            assert h.min() >= 0
            assert h.max() == 1.0 or not h.any()

    def test_positive_logit_scaling(self):
        model = M.build_model(HYBRID)
        img = _image(3)
        base = G.compute_gradcam(model, img, 2).heatmap
        model.head_weight.data[2] *= 7.0
        model.head_bias.data[2] *= 7.0
        assert np.allclose(G.compute_gradcam(model, img, 2).heatmap, base, atol=1e-12)

    def test_no_parameter_gradients_left(self):
        model = M.build_model(HYBRID)
        G.compute_gradcam(model, _image(), 0)
        assert not any(np.any(p.grad) for p in model.params.values() if p.grad is not None)

    def test_bad_class(self):
        with pytest.raises(LabelIndexError):
            G.compute_gradcam(M.build_model(HYBRID), _image(), 3)

    def test_no_conv_stage(self):
        model = M.build_model(CONV_ONLY)
        model.hook_name = None
        with pytest.raises(StructureError):
            G.compute_gradcam(model, _image(), 0)


class TestMassCenter:
    def test_single_cell(self):
        h = np.zeros((4, 4))
        h[3, 0] = 1.0
        assert G.GradCamMap(h, 0, "x").mass_center() == (0.875, 0.125)

    def test_uniform(self):
        assert G.GradCamMap(np.ones((3, 5)), 0, "x").mass_center() == pytest.approx((0.5, 0.5))

    def test_csv(self):
        text = G.GradCamMap(np.array([[0.0, 1.0]]), 0, "x").to_csv()
        assert text == "row,col,value\n0,0,0.0\n0,1,1.0\n"


class TestOverlay:
    def test_zero_map(self):
        img = _image(4, 6)
        out = G.overlay(G.GradCamMap(np.zeros((3, 3)), 0, "x"), img)
        expect = 0.5 * img + 0.5 * G.RAMP[0][:, None, None]
        assert np.allclose(out, expect, atol=1e-15)

    def test_hot_pixel(self):
        h = np.zeros((4, 4))
        h[0, 3] = 1.0
        out = G.overlay(G.GradCamMap(h, 0, "x"), np.zeros((3, 16, 16)))
        red = out[0] - out[2]
        r, c = np.unravel_index(np.argmax(red), red.shape)
        assert r < 4 and c >= 12
        assert red[12:, :4].max() <= 0

    def test_colorize_endpoints(self):
        rgb = G.colorize(np.array([[0.0, 1.0]]))
        assert rgb[:, 0, 0].tolist() == [0, 0, 1]
        assert rgb[:, 0, 1].tolist() == [1, 0, 0]

    def test_png_deterministic(self, tmp_path):
        model = M.build_model(HYBRID)
        img = _image(5)
        cam = G.compute_gradcam(model, img, 1)
        G.render_overlay(cam, img, tmp_path / "a.png")
        G.render_overlay(G.compute_gradcam(model, img, 1), img, tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
        assert D.decode_image(tmp_path / "a.png").shape == (3, 8, 8)

    def test_unwritable(self, tmp_path):
        cam = G.GradCamMap(np.zeros((2, 2)), 0, "x")
        with pytest.raises(OSError):
            G.render_overlay(cam, np.zeros((3, 4, 4)), tmp_path / "missing" / "a.png")
