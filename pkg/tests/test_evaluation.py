import dataclasses

import numpy as np
import numpy.testing as npt
import pytest
import torch
from torch import nn

from remotenet.config import IGNORE_INDEX, ModelConfig
from remotenet.data import Sample, default_potsdam_palette
from remotenet.evaluation import (ConfusionMatrix, TtaSpec, evaluate, metrics,
                                  pad_to_multiple, pixel_accuracy,
                                  predict_labels, predict_probs,
                                  predict_probs_windowed, render_report,
                                  save_prediction)
from remotenet.exceptions import ConfigError, DataError, ShapeError
from remotenet.network import build_network


class TestConfusionMatrix:
    def test_hand_counted_example(self):
        pred = np.array([0, 1, 1, 1])
        ref = np.array([0, 1, 0, 1])
        cm = ConfusionMatrix(2).update(pred, ref)
        npt.assert_array_equal(cm.counts, [[1, 1], [0, 2]])

    def test_ignored_reference_skipped(self):
        cm = ConfusionMatrix(2)
        before = cm.counts.copy()
        cm.update(np.array([0, 1]), np.array([255, 255]))
        npt.assert_array_equal(cm.counts, before)

    def test_additivity(self, rng):
        a_pred = rng.integers(0, 3, 50)
        a_ref = rng.integers(0, 3, 50)
        b_pred = rng.integers(0, 3, 70)
        b_ref = rng.integers(0, 3, 70)
        separate = (ConfusionMatrix(3).update(a_pred, a_ref)
                    + ConfusionMatrix(3).update(b_pred, b_ref))
        joint = ConfusionMatrix(3).update(np.concatenate([a_pred, b_pred]),
                                          np.concatenate([a_ref, b_ref]))
        npt.assert_array_equal(separate.counts, joint.counts)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ConfusionMatrix(2).update(np.zeros(3), np.zeros(4))

    def test_out_of_range_prediction_rejected(self):
        with pytest.raises(DataError):
            ConfusionMatrix(2).update(np.array([5]), np.array([0]))


class TestMetrics:
    def test_worked_example(self):
        cm = ConfusionMatrix(2, np.array([[1, 1], [0, 2]], dtype=np.int64))
        rep = metrics(cm)
        npt.assert_allclose(rep.iou, [0.5, 2 / 3], atol=1e-15)
        npt.assert_allclose(rep.miou, 7 / 12, atol=1e-15)
        npt.assert_allclose(rep.oa, 0.75, atol=1e-15)
        npt.assert_allclose(rep.f1, [2 / 3, 0.8], atol=1e-15)
        npt.assert_allclose(rep.mean_f1, 11 / 15, atol=1e-15)

    def test_perfect_diagonal(self):
        cm = ConfusionMatrix(3, np.diag([5, 7, 2]).astype(np.int64))
        rep = metrics(cm)
        assert rep.miou == rep.mean_f1 == rep.oa == 1.0

    def test_empty_matrix_flags_undefined(self):
        rep = metrics(ConfusionMatrix(3))
        assert rep.miou is None and rep.oa is None and rep.mean_f1 is None
        assert rep.iou == [None, None, None]
        assert not rep.defined

    def test_absent_class_excluded_from_means(self):
        cm = ConfusionMatrix(3, np.array([[4, 0, 0], [0, 4, 0], [0, 0, 0]],
                                         dtype=np.int64))
        rep = metrics(cm)
        assert rep.iou[2] is None
        assert rep.miou == 1.0

    def test_exclusion_drops_class_from_means_and_oa(self):
        counts = np.array([[8, 0, 2], [0, 6, 0], [4, 0, 4]], dtype=np.int64)
        cm = ConfusionMatrix(3, counts)
        rep = metrics(cm, exclude=(2,))
        assert rep.excluded == (2,)
        # OA over non-excluded reference pixels: (8 + 6) / (10 + 6)
        npt.assert_allclose(rep.oa, 14 / 16, atol=1e-15)
        npt.assert_allclose(rep.miou, np.mean([rep.iou[0], rep.iou[1]]), atol=1e-15)

    def test_bad_exclude_index_rejected(self):
        with pytest.raises(ConfigError):
            metrics(ConfusionMatrix(2), exclude=(5,))


class TestTtaSpec:
    def test_parse_none_is_identity_only(self):
        spec = TtaSpec.parse("none")
        assert spec.transforms == ("identity",)
        assert spec.scales == (1.0,)

    def test_parse_hflip_msc(self):
        spec = TtaSpec.parse("hflip,msc")
        assert spec.transforms == ("identity", "hflip")
        assert spec.scales == (0.75, 1.0, 1.25)

    def test_identity_always_included(self):
        spec = TtaSpec(transforms=("hflip",))
        assert "identity" in spec.transforms

    def test_unknown_token_rejected(self):
        with pytest.raises(ConfigError):
            TtaSpec.parse("hflip,swirl")

    def test_unknown_transform_rejected(self):
        with pytest.raises(ConfigError):
            TtaSpec(transforms=("identity", "shear"))


@pytest.fixture(scope="module")
def tiny_net():
    from remotenet.config import default_config

    return build_network(default_config("tiny"), seed=1).eval()


class TestPredict:
    def test_identity_tta_equals_plain_forward(self, tiny_net, rng):
        img = rng.random((3, 64, 64), dtype=np.float32)
        probs = predict_probs(tiny_net, img, TtaSpec.parse("none"))
        with torch.no_grad():
            x = (torch.from_numpy(img).unsqueeze(0) - 0.5) / 0.5
            expected = tiny_net(x).softmax(1)[0].numpy()
        npt.assert_array_equal(probs, expected)

    def test_hflip_symmetric_input_gives_symmetric_map(self, tiny_net, rng):
        img = rng.random((3, 64, 64), dtype=np.float32)
        sym = np.ascontiguousarray((img + img[:, :, ::-1]) / 2)
        probs = predict_probs(tiny_net, sym, TtaSpec.parse("hflip"))
        npt.assert_allclose(probs, probs[:, :, ::-1], atol=1e-5)

    def test_rot90_keeps_square_dims(self, tiny_net, rng):
        img = rng.random((3, 64, 64), dtype=np.float32)
        labels = predict_labels(tiny_net, img, TtaSpec.parse("rot90"))
        assert labels.shape == (64, 64)

    def test_multiscale_pads_and_restores_dims(self, tiny_net, rng):
        img = rng.random((3, 64, 64), dtype=np.float32)
        probs = predict_probs(tiny_net, img, TtaSpec.parse("msc"))
        assert probs.shape == (3, 64, 64)
        npt.assert_allclose(probs.sum(0), 1.0, atol=1e-5)

    def test_non_divisible_input_auto_padded(self, tiny_net, rng):
        img = rng.random((3, 50, 70), dtype=np.float32)
        labels = predict_labels(tiny_net, img, TtaSpec.parse("none"))
        assert labels.shape == (50, 70)

    def test_probability_rows_sum_to_one(self, tiny_net, rng):
        img = rng.random((3, 32, 32), dtype=np.float32)
        probs = predict_probs(tiny_net, img, TtaSpec.parse("hflip,vflip"))
        npt.assert_allclose(probs.sum(0), 1.0, atol=1e-5)


class _PixelwiseNet(nn.Module):
    """1x1-conv probe: prediction is a pure per-pixel map."""

    def __init__(self, num_classes=4):
        super().__init__()
        self.cfg = ModelConfig(patch_strides=(1, 1, 1, 1), num_classes=num_classes)
        self.proj = nn.Conv2d(3, num_classes, 1)

    def forward(self, x):
        return self.proj(x)


class TestSlidingWindowInference:
    def test_window_equal_to_image_matches_whole(self, tiny_net, rng):
        img = rng.random((3, 64, 64), dtype=np.float32)
        whole = predict_probs(tiny_net, img)
        windowed = predict_probs_windowed(tiny_net, img, window=64)
        npt.assert_array_equal(whole, windowed)

    def test_overlap_average_exact_for_pixelwise_net(self, rng):
        torch.manual_seed(3)
        net = _PixelwiseNet().eval()
        img = rng.random((3, 32, 32), dtype=np.float32)
        whole = predict_probs(net, img)
        # stride = window/2 keeps every overlap count a power of two
        windowed = predict_probs_windowed(net, img, window=16, stride=8)
        npt.assert_array_equal(whole, windowed)

    def test_shards_sum_to_single_pass(self, tiny_net, rng):
        samples = [Sample(rng.random((3, 32, 32), dtype=np.float32),
                          rng.integers(0, 3, (32, 32)).astype(np.int64), f"s{i}")
                   for i in range(4)]
        _, cm_all = evaluate(tiny_net, samples, 3)
        _, cm_a = evaluate(tiny_net, samples[:2], 3)
        _, cm_b = evaluate(tiny_net, samples[2:], 3)
        npt.assert_array_equal((cm_a + cm_b).counts, cm_all.counts)


def test_pad_to_multiple_round_trips():
    x = torch.arange(2 * 3 * 5 * 7, dtype=torch.float32).reshape(2, 3, 5, 7)
    padded, (h, w) = pad_to_multiple(x, 4)
    assert (h, w) == (5, 7)
    assert padded.shape[-2] % 4 == 0 and padded.shape[-1] % 4 == 0
    npt.assert_array_equal(padded[:, :, :5, :7].numpy(), x.numpy())


def test_pixel_accuracy_ignores_255(rng):
    torch.manual_seed(0)
    net = _PixelwiseNet(num_classes=2).eval()
    img = rng.random((3, 8, 8), dtype=np.float32)
    pred = predict_labels(net, img)
    label = pred.copy()
    label[0, :] = IGNORE_INDEX
    acc = pixel_accuracy(net, [Sample(img, label, "x")])
    assert acc == 1.0


def test_render_report_structure():
    cm = ConfusionMatrix(2, np.array([[1, 1], [0, 2]], dtype=np.int64))
    text = render_report(metrics(cm), class_names=["road", "water"])
    assert "road" in text and "water" in text
    assert "OA" in text and "mean" in text
    empty = render_report(metrics(ConfusionMatrix(2)))
    assert "n/a" in empty


def test_render_report_notes_exclusion():
    counts = np.eye(6, dtype=np.int64) * 5
    rep = metrics(ConfusionMatrix(6, counts), exclude=(5,))
    text = render_report(rep, class_names=default_potsdam_palette().class_names())
    assert "excluded" in text and "clutter" in text


def test_save_prediction_rasters(tmp_path, rng):
    label = rng.integers(0, 6, (16, 16)).astype(np.int64)
    written = save_prediction(tmp_path, "tile0", label, default_potsdam_palette())
    assert len(written) == 2
    from PIL import Image

    idx = np.asarray(Image.open(written[0]))
    npt.assert_array_equal(idx, label)
    color = np.asarray(Image.open(written[1]))
    assert color.shape == (16, 16, 3)
