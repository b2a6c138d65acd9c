import numpy as np
import pytest

from ffnet.errors import NonFinite, ShapeMismatch
from ffnet.layers import (
    Activation,
    ConvLayerSpec,
    ConvParams,
    DenseHeadSpec,
    DenseParams,
    VdpLayerSpec,
    conv_forward,
    dense_backward,
    dense_forward,
    dropout,
    dropout_backward,
    init_conv,
    init_vdp,
    vdp_backward,
    vdp_forward,
)
from ffnet.tensor import VolumeGrid, partition
from ffnet.training import gradcheck

ID = Activation.IDENTITY


def brute_vdp(spec, params, x):
    """Loop-by-loop reference: one explicit dot product per volume and output."""
    g = spec.grid
    out = np.zeros(spec.output_shape)
    vols = partition(x.astype(np.float64), g)
    n = 0
    for i in range(g.n_h):
        for j in range(g.n_w):
            for k in range(g.n_c):
                w = params.weights[i, j, k].astype(np.float64)
                for o in range(spec.volume_output):
                    z = sum(float(a) * float(b) for a, b in zip(vols[n].ravel(), w[..., o].ravel()))
                    z += float(params.biases[i, j, k, o])
                    out[i, j, k * spec.volume_output + o] = max(z, 0.0) if spec.activation is Activation.RELU else z
                n += 1
    return out


def brute_conv(spec, params, x):
    h, w, _ = x.shape
    ho, wo, co = spec.output_shape(x.shape)
    (ph, pw), (sh, sw), (kh, kw) = spec.padding, spec.stride, spec.kernel
    out = np.zeros((ho, wo, co))
    for oy in range(ho):
        for ox in range(wo):
            for c in range(co):
                acc = float(params.biases[c])
                for di in range(kh):
                    for dj in range(kw):
                        y, xx = oy * sh + di - ph, ox * sw + dj - pw
                        if not (0 <= y < h and 0 <= xx < w):
                            continue
                        if spec.mode.value == "depthwise":
                            acc += x[y, xx, c] * params.weights[di, dj, c]
                        else:
                            acc += float(x[y, xx, :] @ params.weights[di, dj, :, c])
                out[oy, ox, c] = acc
    return out


# ------------------------------------------------------------------------ VDP


def test_zero_input_isolates_bias(rng):
    spec = VdpLayerSpec.from_volumes((2, 2, 3), (2, 2, 1), 5)
    params = init_vdp(spec, rng)
    params.biases[...] = rng.standard_normal(spec.bias_shape)
    out = vdp_forward(spec, params, np.zeros(spec.input_shape, np.float32))
    for i in range(2):
        for j in range(2):
            np.testing.assert_array_equal(out[i, j], np.maximum(params.biases[i, j, 0], 0))


def test_first_layer_of_ffn32_shape(rng):
    spec = VdpLayerSpec.from_volumes((4, 4, 3), (8, 8, 1), 64)
    assert spec.input_shape == (32, 32, 3)
    out = vdp_forward(spec, init_vdp(spec, rng), rng.standard_normal((32, 32, 3)).astype(np.float32))
    assert out.shape == (8, 8, 64)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_loop_reference(seed):
    rng = np.random.default_rng(seed)
    spec = VdpLayerSpec.from_volumes((2, 1, 2), (2, 3, 2), 3, Activation.RELU if seed % 2 else ID)
    params = init_vdp(spec, rng, np.float64)
    params.biases[...] = rng.standard_normal(spec.bias_shape)
    x = rng.standard_normal(spec.input_shape)
    np.testing.assert_allclose(vdp_forward(spec, params, x), brute_vdp(spec, params, x), atol=1e-12)


def test_single_volume_equals_dense_layer(rng):
    spec = VdpLayerSpec.from_volumes((4, 4, 3), (1, 1, 1), 7, ID)
    params = init_vdp(spec, rng)
    params.biases[...] = rng.standard_normal(spec.bias_shape).astype(np.float32)
    x = rng.uniform(-1, 1, spec.input_shape).astype(np.float32)
    w = params.weights.reshape(48, 7).astype(np.float64)
    expected = [sum(x.ravel()[v] * w[v, o] for v in range(48)) + params.biases.ravel()[o] for o in range(7)]
    got = vdp_forward(spec, params, x)
    assert got.dtype == np.float32
    np.testing.assert_allclose(got.ravel(), expected, rtol=0, atol=1e-6)


def test_zero_grad_out_gives_zero_grads(rng):
    spec = VdpLayerSpec.from_volumes((2, 2, 2), (2, 2, 1), 3)
    params = init_vdp(spec, rng, np.float64)
    x = rng.standard_normal(spec.input_shape)
    for g in vdp_backward(spec, params, x, np.zeros(spec.output_shape)):
        assert not g.any()


def test_single_volume_weight_grad_is_outer_product(rng):
    spec = VdpLayerSpec.from_volumes((2, 3, 2), (1, 1, 1), 4, ID)
    params = init_vdp(spec, rng, np.float64)
    x = rng.standard_normal(spec.input_shape)
    g = rng.standard_normal(spec.output_shape)
    gw, gb, _ = vdp_backward(spec, params, x, g)
    np.testing.assert_allclose(gw.reshape(12, 4), np.outer(x.ravel(), g.ravel()), atol=1e-14)
    np.testing.assert_allclose(gb.ravel(), g.ravel())


def test_vdp_gradcheck_small_layer():
    spec = VdpLayerSpec.from_volumes((2, 2, 2), (2, 2, 1), 3)
    assert spec.input_shape == (4, 4, 2)
    report = gradcheck(spec, seed=3)
    assert report.passed, report.errors


def test_identity_layer_gradcheck_is_near_exact():
    report = gradcheck(VdpLayerSpec.from_volumes((2, 2, 3), (1, 2, 1), 4, ID), seed=11)
    assert report.max_error < 1e-8


def test_batched_forward_backward_matches_per_sample(rng):
    spec = VdpLayerSpec.from_volumes((2, 2, 2), (2, 1, 2), 3)
    params = init_vdp(spec, rng, np.float64)
    xs = rng.standard_normal((4,) + spec.input_shape)
    gs = rng.standard_normal((4,) + spec.output_shape)
    out = vdp_forward(spec, params, xs)
    gw, gb, gx = vdp_backward(spec, params, xs, gs)
    parts = [vdp_backward(spec, params, xs[b], gs[b]) for b in range(4)]
    for b in range(4):
        np.testing.assert_allclose(out[b], vdp_forward(spec, params, xs[b]))
        np.testing.assert_allclose(gx[b], parts[b][2])
    np.testing.assert_allclose(gw, sum(p[0] for p in parts), atol=1e-12)
    np.testing.assert_allclose(gb, sum(p[1] for p in parts), atol=1e-12)


@pytest.mark.parametrize("activation", [ID, Activation.RELU])
def test_zeroing_one_volume_changes_only_its_outputs(rng, activation):
    spec = VdpLayerSpec.from_volumes((2, 2, 2), (2, 3, 2), 3, activation)
    params = init_vdp(spec, rng, np.float64)
    params.biases[...] = rng.standard_normal(spec.bias_shape)
    x = rng.standard_normal(spec.input_shape)
    base = vdp_forward(spec, params, x)
    g = spec.grid
    for i in range(g.n_h):
        for j in range(g.n_w):
            for k in range(g.n_c):
                x2 = x.copy()
                x2[i * 2 : (i + 1) * 2, j * 2 : (j + 1) * 2, k * 2 : (k + 1) * 2] = 0
                changed = vdp_forward(spec, params, x2) != base
                allowed = np.zeros_like(changed)
                allowed[i, j, k * 3 : (k + 1) * 3] = True
                assert not (changed & ~allowed).any()
                if activation is ID:
                    assert changed[allowed].all()


def test_weight_grads_depend_only_on_own_block(rng):
    spec = VdpLayerSpec.from_volumes((2, 2, 1), (2, 2, 1), 2, ID)
    params = init_vdp(spec, rng, np.float64)
    x = rng.standard_normal(spec.input_shape)
    g = rng.standard_normal(spec.output_shape)
    gw, _, _ = vdp_backward(spec, params, x, g)
    x2 = x.copy()
    x2[2:, 2:] += 5.0  # only volume (1, 1, 0)
    gw2, _, _ = vdp_backward(spec, params, x2, g)
    changed = (gw != gw2).any(axis=(3, 4, 5, 6))
    assert changed[1, 1, 0] and changed.sum() == 1


def test_per_position_layer_equals_independent_dense_layers(rng):
    h, w, c, out = 3, 4, 5, 6
    spec = VdpLayerSpec.from_volumes((1, 1, c), (h, w, 1), out, ID)
    params = init_vdp(spec, rng, np.float64)
    params.biases[...] = rng.standard_normal(spec.bias_shape)
    x = rng.standard_normal((h, w, c))
    y = vdp_forward(spec, params, x)
    for i in range(h):
        for j in range(w):
            dense = DenseParams(params.weights[i, j, 0, 0, 0], params.biases[i, j, 0])
            np.testing.assert_allclose(y[i, j], dense_forward(dense, x[i, j]), atol=1e-12)


def test_repeated_region_distinct_responses_unlike_1x1_conv(rng):
    c, out = 4, 5
    column = rng.standard_normal(c)
    x = np.broadcast_to(column, (3, 3, c)).copy()
    conv = ConvLayerSpec(c, out, (1, 1))
    cp = init_conv(conv, rng, np.float64)
    conv_out = conv_forward(conv, cp, x)
    assert np.allclose(conv_out, conv_out[0, 0])
    spec = VdpLayerSpec.from_volumes((1, 1, c), (3, 3, 1), out, ID)
    vdp_out = vdp_forward(spec, init_vdp(spec, rng, np.float64), x)
    flat = vdp_out.reshape(9, out)
    assert all(not np.allclose(flat[a], flat[b]) for a in range(9) for b in range(a + 1, 9))


def test_forward_is_deterministic():
    spec = VdpLayerSpec.from_volumes((2, 2, 3), (2, 2, 1), 8)
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(99)
        params = init_vdp(spec, rng)
        outs.append(vdp_forward(spec, params, rng.standard_normal(spec.input_shape).astype(np.float32)))
    assert outs[0].tobytes() == outs[1].tobytes()


def test_shape_and_finiteness_errors(rng):
    spec = VdpLayerSpec.from_volumes((2, 2, 1), (2, 2, 1), 2)
    params = init_vdp(spec, rng)
    with pytest.raises(ShapeMismatch):
        vdp_forward(spec, params, np.zeros((4, 4, 2), np.float32))
    with pytest.raises(ShapeMismatch):
        vdp_backward(spec, params, np.zeros((4, 4, 1)), np.zeros((2, 2, 3)))
    x = np.zeros((4, 4, 1), np.float32)
    x[0, 0, 0] = np.nan
    with pytest.raises(NonFinite):
        vdp_forward(spec, params, x)
    with pytest.raises(ShapeMismatch):
        VdpLayerSpec((5, 4, 1), VolumeGrid(2, 2, 1, 2, 2, 1), 2)


def test_init_is_glorot_bounded_with_zero_bias(rng):
    spec = VdpLayerSpec.from_volumes((4, 4, 3), (2, 2, 1), 64)
    params = init_vdp(spec, rng)
    limit = np.sqrt(6 / (48 + 64))
    assert np.abs(params.weights).max() <= limit
    assert np.abs(params.weights).max() > 0.9 * limit
    assert not params.biases.any()


# ----------------------------------------------------------------------- conv


def test_1x1_identity_kernel_copies_input(rng):
    spec = ConvLayerSpec(3, 3, (1, 1))
    params = ConvParams(np.eye(3)[None, None], np.zeros(3))
    x = rng.standard_normal((5, 4, 3))
    np.testing.assert_array_equal(conv_forward(spec, params, x), x)


def test_3x3_ones_on_ones_counts_overlap():
    spec = ConvLayerSpec(1, 1, (3, 3), (1, 1), (1, 1))
    out = conv_forward(spec, ConvParams(np.ones((3, 3, 1, 1)), np.zeros(1)), np.ones((3, 3, 1)))
    assert out[1, 1, 0] == 9
    assert out[0, 0, 0] == out[0, 2, 0] == out[2, 0, 0] == out[2, 2, 0] == 4
    assert out[0, 1, 0] == 6


def test_depthwise_same_padding_keeps_shape(rng):
    spec = ConvLayerSpec(4, 4, (3, 3), (1, 1), (1, 1), "depthwise")
    assert conv_forward(spec, init_conv(spec, rng), rng.standard_normal((8, 8, 4)).astype(np.float32)).shape == (8, 8, 4)


@pytest.mark.parametrize("mode", ["standard", "depthwise"])
@pytest.mark.parametrize("seed", range(4))
def test_conv_matches_loop_reference(mode, seed):
    rng = np.random.default_rng(seed)
    ci = int(rng.integers(1, 4))
    co = ci if mode == "depthwise" else int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    spec = ConvLayerSpec(ci, co, (k, k), tuple(int(s) for s in rng.integers(1, 3, 2)), (int(rng.integers(0, 2)),) * 2, mode)
    params = init_conv(spec, rng, np.float64)
    params.biases[...] = rng.standard_normal(co)
    x = rng.standard_normal((7, 6, ci))
    np.testing.assert_allclose(conv_forward(spec, params, x), brute_conv(spec, params, x), atol=1e-12)


@pytest.mark.parametrize("mode", ["standard", "depthwise"])
def test_conv_gradcheck(mode):
    spec = ConvLayerSpec(2, 2, (3, 3), (2, 1), (1, 0), mode)
    assert gradcheck((spec, (6, 5, 2)), seed=5).passed


def test_conv_geometry_errors():
    with pytest.raises(ShapeMismatch):
        ConvLayerSpec(2, 3, mode="depthwise")
    with pytest.raises(ShapeMismatch):
        ConvLayerSpec(1, 1, (5, 5)).output_shape((3, 3, 1))
    with pytest.raises(ShapeMismatch):
        ConvLayerSpec(2, 1).output_shape((5, 5, 1))


# ---------------------------------------------------------------------- dense


def test_dense_examples(rng):
    p = DenseParams(rng.standard_normal((4, 3)), rng.standard_normal(3))
    np.testing.assert_array_equal(dense_forward(p, np.zeros(4)), p.bias)
    eye = DenseParams(np.eye(5), np.zeros(5))
    f = rng.standard_normal(5)
    np.testing.assert_array_equal(dense_forward(eye, f), f)
    with pytest.raises(ShapeMismatch):
        dense_forward(p, np.zeros(5))


def test_dense_backward_formulas(rng):
    p = DenseParams(rng.standard_normal((4, 3)), rng.standard_normal(3))
    f, g = rng.standard_normal(4), rng.standard_normal(3)
    gw, gb, gf = dense_backward(p, f, g)
    np.testing.assert_allclose(gw, np.outer(f, g))
    np.testing.assert_allclose(gb, g)
    np.testing.assert_allclose(gf, p.weights @ g)
    assert gradcheck(DenseHeadSpec(6, 4), seed=2).passed


# -------------------------------------------------------------------- dropout


def test_dropout_rate_zero_and_inference_are_identity(rng):
    x = rng.standard_normal(100).astype(np.float32)
    out, mask = dropout(x, 0.0, 1, training=True)
    np.testing.assert_array_equal(out, x)
    assert mask.all()
    out, _ = dropout(x, 0.25, 1, training=False)
    np.testing.assert_array_equal(out, x)


def test_dropout_keeps_three_quarters_and_rescales():
    x = np.ones(1_000_000, np.float32)
    out, mask = dropout(x, 0.25, 0, training=True)
    assert abs(mask.mean() - 0.75) < 0.005
    np.testing.assert_allclose(out[mask], 1 / 0.75, rtol=1e-6)
    assert not out[~mask].any()
    g = dropout_backward(np.ones_like(x), mask, 0.25)
    np.testing.assert_array_equal(g, out)


def test_dropout_rejects_bad_rate():
    with pytest.raises(ValueError):
        dropout(np.ones(3), 1.0, 0)
