import numpy as np
import pytest

from castream.attribution import (cam, channel_masks, explain, grad_cam, grad_cam_pp, gradcampp_weights,
                                  raw_attention_map, saliency_batch, score_cam)
from castream.backbone import StagedBackbone, StageSpec
from castream.errors import DomainError, ShapeError, UsageError
from castream.model import CAClassifier
from castream.saliency import SaliencyMap, minmax_normalize, upsample_bilinear

from conftest import tiny_backbone, tiny_stream


def naive_upsample(v, H, W):
    h, w = v.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            y = max((i + 0.5) * h / H - 0.5, 0.0)
            x = max((j + 0.5) * w / W - 0.5, 0.0)
            y0, x0 = min(int(np.floor(y)), h - 1), min(int(np.floor(x)), w - 1)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            ly, lx = y - y0, x - x0
            out[i, j] = ((1 - ly) * (1 - lx) * v[y0, x0] + (1 - ly) * lx * v[y0, x1]
                         + ly * (1 - lx) * v[y1, x0] + ly * lx * v[y1, x1])
    return out


# ----------------------------------------------------------------------------- upsampling and normalization


def test_upsample_constant_and_monotone():
    np.testing.assert_allclose(upsample_bilinear(np.full((3, 2), 4.0), 9, 8), 4.0)
    up = upsample_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), 4, 4)
    for row in up:
        assert np.all(np.diff(row) >= 0) and row[0] == 0 and row[-1] == 1


@pytest.mark.parametrize("src,dst", [((2, 2), (4, 4)), ((3, 5), (7, 11)), ((4, 4), (32, 32)), ((1, 3), (2, 3))])
def test_upsample_matches_naive_loop(src, dst):
    v = np.random.default_rng(sum(src)).standard_normal(src)
    out = upsample_bilinear(v, *dst)
    np.testing.assert_allclose(out, naive_upsample(v, *dst), atol=1e-12, rtol=0)
    assert out.min() >= v.min() - 1e-12 and out.max() <= v.max() + 1e-12


def test_upsample_errors():
    with pytest.raises(ShapeError):
        upsample_bilinear(np.zeros((0, 3)), 4, 4)
    with pytest.raises(ShapeError):
        upsample_bilinear(np.zeros((4, 4)), 2, 8)


def test_minmax_rules():
    np.testing.assert_array_equal(minmax_normalize(np.full((2, 3), 7.0)), np.zeros((2, 3)))
    m = minmax_normalize(np.array([[1.0, 3.0], [2.0, 5.0]]))
    assert m.min() == 0 and m.max() == 1
    s = SaliencyMap(3, np.array([[0.0, 2.0]]), 1, "x").normalized()
    assert s.normalization == "minmax" and s.values.tolist() == [[0.0, 1.0]]


# ----------------------------------------------------------------------------- CAM and Grad-CAM


def test_cam_one_hot_and_difference():
    specs = [StageSpec(0, 3, 2, 1, 1)]
    bb = StagedBackbone(specs, num_classes=2, input_shape=(3, 4, 4), dtype=np.float64)
    A, B = np.random.default_rng(0).standard_normal((2, 3, 3))
    F = np.stack([A, B])
    bb.params["head.weight"].data[:] = [[0.0, 1.0], [1.0, -1.0]]
    assert np.array_equal(cam(bb, F, 0).values, B)
    np.testing.assert_array_equal(cam(bb, F, 1).values, A - B)
    with pytest.raises(DomainError):
        cam(bb, F, 0, stage=1)
    with pytest.raises(DomainError):
        cam(bb, F, 2)


def test_cam_non_final_stage_rejected(backbone64):
    model = CAClassifier(backbone64)
    with pytest.raises(DomainError):
        cam(model, np.zeros((6, 3, 3)), 0, stage=0)
    with pytest.raises(UsageError):
        saliency_batch(model, np.zeros((1, 3, 12, 12)), "cam", [0], stage=1)


def test_gradcam_equals_scaled_cam_on_gap_path(backbone64, images64):
    model = CAClassifier(backbone64)
    for i, x in enumerate(images64):
        c = i % 4
        F_L = model.features(x)[-1].data
        hw = F_L.shape[1] * F_L.shape[2]
        g = grad_cam(model, x, c)
        ref = np.maximum(cam(model, F_L, c).values, 0) / hw
        np.testing.assert_allclose(g.values, ref, atol=1e-9, rtol=0)
        np.testing.assert_allclose(g.meta["alpha"], backbone64.head_weight.data[c] / hw, atol=1e-12)
        np.testing.assert_allclose(minmax_normalize(g.values), minmax_normalize(ref), atol=1e-9)
        if ref.max() > 0:
            assert np.argmax(g.values) == np.argmax(ref)


def test_gradcam_zero_head_row_gives_zero_map(backbone64, images64):
    backbone64.params["head.weight"].data[1] = 0
    model = CAClassifier(backbone64)
    for stage in range(3):
        g = grad_cam(model, images64[0], 1, stage=stage)
        assert np.array_equal(g.values, np.zeros_like(g.values))


def test_gradcam_invalid_stage(ca_model, images64):
    with pytest.raises(DomainError):
        grad_cam(ca_model, images64[0], 0, stage=7)


def test_gap_and_ca_share_features_but_not_weights(ca_model, images64):
    x = images64[2]
    for stage in range(2):
        g1 = grad_cam(ca_model, x, 1, stage, "gap")
        g2 = grad_cam(ca_model, x, 1, stage, "ca")
        assert np.array_equal(g1.meta["features"], g2.meta["features"])
        assert not np.allclose(g1.meta["alpha"], g2.meta["alpha"])


def test_last_stage_ca_weights_closed_form(ca_model, images64):
    # score gradients of a softmax sum to zero over patches, so the spatial mean
    # of dy/dF_L through the stream is W_L^T w_c / (h w) whatever the attention
    W_L = ca_model.stream.params["stream.proj2.weight"]
    W_L.data = W_L.data + 0.2 * np.random.default_rng(0).standard_normal(W_L.shape)
    w_c = ca_model.backbone.head_weight.data[3]
    for x in images64:
        g = grad_cam(ca_model, x, 3, 2, "ca")
        hw = g.values.size
        np.testing.assert_allclose(g.meta["alpha"], W_L.data.T @ w_c / hw, atol=1e-12)


def test_gradcam_depends_on_class(ca_model, images64):
    maps = [grad_cam(ca_model, images64[0], c, pooling="ca").values for c in range(4)]
    assert any(not np.allclose(maps[0], m) for m in maps[1:])


def test_saliency_batch_matches_single(ca_model, images64):
    classes = np.array([0, 1, 2, 3, 0])
    for method, fn in (("gradcam", grad_cam), ("gradcampp", grad_cam_pp)):
        batch = saliency_batch(ca_model, images64, method, classes, stage=1, pooling="ca")
        for i in range(len(images64)):
            single = fn(ca_model, images64[i], classes[i], 1, "ca").values
            np.testing.assert_allclose(batch[i], single, atol=1e-12)
            assert np.all(batch[i] >= 0)


# ----------------------------------------------------------------------------- Grad-CAM++


def test_gradcampp_zero_gradients_zero_weights():
    F = np.random.default_rng(1).standard_normal((1, 3, 4, 4))
    np.testing.assert_array_equal(gradcampp_weights(F, np.zeros_like(F)), np.zeros((1, 3)))


def test_gradcampp_stabilizer_prevents_nan():
    # 2 g^2 + sum(F) g^3 == 0 exactly for g = 1, sum(F) = -2
    F = np.zeros((1, 1, 1, 2))
    F[..., 0] = -2.0
    g = np.ones_like(F)
    w = gradcampp_weights(F, g)
    assert np.all(np.isfinite(w))


def test_gradcampp_single_pixel_closed_form():
    rng = np.random.default_rng(2)
    F = rng.uniform(0.1, 2.0, (1, 5, 1, 1))
    g = rng.standard_normal((1, 5, 1, 1))
    w = gradcampp_weights(F, g)
    for k in range(5):
        gk, fk = g[0, k, 0, 0], F[0, k, 0, 0]
        a = gk ** 2 / (2 * gk ** 2 + fk * gk ** 3 + 1e-8)
        assert abs(w[0, k] - a * max(gk, 0.0)) < 1e-12


def test_gradcampp_matches_loop_formula():
    rng = np.random.default_rng(3)
    F = rng.uniform(0, 1, (2, 3, 2, 3))
    g = rng.standard_normal(F.shape)
    w = gradcampp_weights(F, g)
    for n in range(2):
        for k in range(3):
            tot = F[n, k].sum()
            acc = 0.0
            for i in range(2):
                for j in range(3):
                    gij = g[n, k, i, j]
                    if gij != 0:
                        acc += gij ** 2 / (2 * gij ** 2 + tot * gij ** 3 + 1e-8) * max(gij, 0)
            assert abs(w[n, k] - acc) < 1e-12


# ----------------------------------------------------------------------------- Score-CAM


def test_scorecam_matches_hand_script():
    specs = [StageSpec(0, 3, 2, 1, 1)]
    bb = StagedBackbone(specs, num_classes=3, input_shape=(3, 6, 6), seed=3, dtype=np.float64)
    model = CAClassifier(bb)
    x = np.random.default_rng(4).uniform(0, 1, (3, 6, 6))
    c = 2
    s = score_cam(model, x, c)

    def prob(img):
        z = bb.forward_stages(img)[1].data
        e = np.exp(z - z.max())
        return (e / e.sum())[c]

    F = bb.forward_stages(x)[0][0].data
    base = prob(np.zeros_like(x))
    scores = []
    for k in range(2):
        m = naive_upsample(F[k], 6, 6)
        m = (m - m.min()) / (m.max() - m.min())
        scores.append(prob(x * m) - base)
    alpha = np.exp(scores) / np.sum(np.exp(scores))
    np.testing.assert_allclose(s.meta["alpha"], alpha, atol=1e-12)
    np.testing.assert_allclose(s.values, np.maximum(alpha[0] * F[0] + alpha[1] * F[1], 0), atol=1e-12)


def test_scorecam_constant_channel_gives_black_probe():
    F = np.zeros((2, 3, 3))
    F[1] = np.arange(9).reshape(3, 3)
    masks = channel_masks(F, 6, 6)
    assert np.array_equal(masks[0], np.zeros((6, 6)))
    assert masks[1].max() == 1.0


def test_scorecam_paths_share_masks_and_repeat_exactly(ca_model, images64):
    x = images64[3]
    a = score_cam(ca_model, x, 1, pooling="gap")
    b = score_cam(ca_model, x, 1, pooling="ca")
    c = score_cam(ca_model, x, 1, pooling="ca")
    assert np.array_equal(a.meta["masks"], b.meta["masks"])
    assert np.array_equal(a.meta["features"], b.meta["features"])
    assert not np.allclose(a.meta["alpha"], b.meta["alpha"])
    assert np.array_equal(b.values, c.values)
    batch = saliency_batch(ca_model, images64[3:4], "scorecam", np.array([1]), pooling="ca", batch_limit=2)
    np.testing.assert_allclose(batch[0], b.values, atol=1e-12)


# ----------------------------------------------------------------------------- raw attention and dispatch


def test_raw_attention_requires_ca(ca_model, images64):
    with pytest.raises(UsageError):
        explain(ca_model, images64[0], "rawattention", pooling="gap")
    with pytest.raises(UsageError):
        raw_attention_map(CAClassifier(tiny_backbone()), images64[0])
    m = explain(ca_model, images64[0], "rawattention", pooling="ca", stage=1)
    assert m.class_index is None and m.values.shape == (6, 6)
    assert m.values.min() == 0.0 and m.values.max() == 1.0


def test_raw_attention_stage_not_visited(images64):
    bb = tiny_backbone()
    model = CAClassifier(bb, tiny_stream(bb, start_stage=2))
    with pytest.raises(UsageError):
        explain(model, images64[0], "rawattention", pooling="ca", stage=0)


def test_explain_dispatch(ca_model, images64):
    with pytest.raises(UsageError):
        explain(ca_model, images64[0], "lime")
    with pytest.raises(UsageError):
        explain(ca_model, images64[0], "gradcam", pooling="max")
    for method in ("cam", "gradcam", "gradcampp", "scorecam"):
        m = explain(ca_model, images64[0], method, pooling="ca")
        assert m.values.shape == (3, 3) and m.method == method
        if method != "cam":
            assert np.all(m.values >= 0)
    pred = np.argmax(ca_model.logits(images64[:1], "ca"), axis=1)[0]
    assert explain(ca_model, images64[0], "gradcam", pooling="ca").class_index == pred
