import numpy as np
import pytest

from panops.deform import (DeformParams, dcn_forward, deform_backward,
                           fd_gradient, gradcheck)
from panops.tensor import Tensor

from oracles import bilinear_ref, deform_ref, grid_taps


def test_weights_gradient_is_plain_correlation_at_zero_offsets():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    up = Tensor(rng.normal(size=(2, 3, 5, 5)))
    weights = rng.normal(size=9)
    params = DeformParams(kernel=3, weights=weights)
    grads = deform_backward("v1", x, params, Tensor.zeros((2, 18, 5, 5)), None, up)

    # correlation of the zero-padded input with the upstream gradient
    padded = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros(9)
    for k, (di, dj) in enumerate(grid_taps(3, 3, 1)):
        shifted = padded[:, :, 1 + di:6 + di, 1 + dj:6 + dj]
        want[k] = np.sum(shifted * up.data.astype(np.float64))
    assert np.max(np.abs(grads.weights - want)) < 1e-6


def test_modulation_gradient_is_weight_times_sample_times_upstream():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(1, 1, 4, 4)))
    up = Tensor(rng.normal(size=(1, 1, 4, 4)))
    weights = rng.normal(size=9)
    offsets = Tensor(rng.normal(size=(1, 18, 4, 4)))
    modulation = Tensor(rng.uniform(0.2, 1.0, size=(1, 9, 4, 4)))
    params = DeformParams(kernel=3, weights=weights)
    grads = deform_backward("v2", x, params, offsets, modulation, up)

    taps = grid_taps(3, 3, 1)
    for k in range(9):
        for i in range(4):
            for j in range(4):
                sy = i + taps[k][0] + float(offsets.data[0, 2 * k, i, j])
                sx = j + taps[k][1] + float(offsets.data[0, 2 * k + 1, i, j])
                want = weights[k] * bilinear_ref(x.data[0, 0], sy, sx) * up.data[0, 0, i, j]
                assert grads.modulation[0, k, i, j] == pytest.approx(want, abs=1e-6)


def test_hand_case_single_tap_fractional_offset():
    # 2x2 map, one 1x1 tap, every pixel sampling 0.3 down / 0.4 right
    x = Tensor(np.array([[1, 2], [3, 4]], dtype=np.float32).reshape(1, 1, 2, 2))
    offsets = np.zeros((1, 2, 2, 2), dtype=np.float32)
    offsets[0, 0] = 0.3
    offsets[0, 1] = 0.4
    params = DeformParams(kernel=1, weights=[1.0])
    up = Tensor.full((1, 1, 2, 2), 1.0)
    g = deform_backward("v1", x, params, Tensor(offsets), None, up)

    assert g.offsets[0, 0, 0, 0] == pytest.approx(2.0, abs=1e-6)
    assert g.offsets[0, 1, 0, 0] == pytest.approx(1.0, abs=1e-6)
    assert g.offsets[0, 0, 0, 1] == pytest.approx(1.2, abs=1e-6)
    assert g.offsets[0, 1, 0, 1] == pytest.approx(-2.6, abs=1e-6)
    want_gx = np.array([[0.42, 0.70], [0.60, 1.00]])
    assert np.allclose(g.x[0, 0], want_gx, atol=1e-6)
    assert g.weights[0] == pytest.approx(7.62, abs=1e-5)


def test_offset_gradient_takes_right_limit_at_integer_coordinates():
    x = Tensor(np.array([[1, 2], [3, 4]], dtype=np.float32).reshape(1, 1, 2, 2))
    params = DeformParams(kernel=1, weights=[1.0])
    up = Tensor.full((1, 1, 2, 2), 1.0)
    g = deform_backward("v1", x, params, Tensor.zeros((1, 2, 2, 2)), None, up)

    assert g.offsets[0, 0, 0, 0] == pytest.approx(2.0)   # toward x[1,0]
    assert g.offsets[0, 1, 0, 0] == pytest.approx(1.0)   # toward x[0,1]
    # the last pixel looks off the grid on both sides: slope toward zero fill
    assert g.offsets[0, 0, 1, 1] == pytest.approx(-4.0)
    assert g.offsets[0, 1, 1, 1] == pytest.approx(-4.0)


def _fd_setup(seed, shape=(1, 1, 3, 3), K=9):
    """A draw whose offsets stay well clear of integer sampling coordinates.

    Values are rounded through float32 so the loss sees exactly the numbers
    the operator will use.
    """
    rng = np.random.default_rng(seed)
    n, c, h, w = shape
    x = rng.uniform(-1.0, 1.0, shape).astype(np.float32).astype(np.float64)
    weights = rng.uniform(0.4, 1.2, K) * rng.choice([-1.0, 1.0], K)
    off = rng.integers(-1, 2, (n, 2 * K, h, w)) + rng.uniform(0.1, 0.9, (n, 2 * K, h, w))
    return x, weights, off.astype(np.float32).astype(np.float64)


def test_fd_on_linear_weights_is_exact():
    x, weights, off = _fd_setup(2)

    def loss(w):
        return float(np.sum(deform_ref(x, (3, 3), 1, 1, w, off)))

    numeric = fd_gradient(loss, weights, 1e-3)
    up = Tensor.full((1, 1, 3, 3), 1.0)
    analytic = deform_backward("v1", Tensor(x), DeformParams(kernel=3, weights=weights),
                               Tensor(off), None, up).weights
    assert np.max(np.abs(numeric - analytic)) < 1e-8


def test_fd_error_shrinks_with_step_on_curved_loss():
    # cube the output so the third derivative is nonzero and truncation,
    # not roundoff, dominates the finite-difference error
    x, weights, off = _fd_setup(3)

    def loss(o):
        y = deform_ref(x, (3, 3), 1, 1, weights, o)
        return float(np.sum(y ** 3))

    y0 = deform_ref(x, (3, 3), 1, 1, weights, off)
    up = Tensor(3.0 * y0 ** 2)
    analytic = deform_backward("v1", Tensor(x), DeformParams(kernel=3, weights=weights),
                               Tensor(off), None, up).offsets

    err = {}
    for step in (1e-2, 1e-3):
        numeric = fd_gradient(loss, off, step)
        err[step] = np.max(np.abs(numeric - analytic))
    assert err[1e-2] > 0.0
    assert err[1e-3] <= err[1e-2]


def test_fd_rejects_bad_step():
    loss = lambda v: float(np.sum(v ** 2))
    for step in (0.0, -1e-3, float("nan")):
        with pytest.raises(ValueError):
            fd_gradient(loss, np.ones(3), step)


@pytest.mark.parametrize("variant", ["v1", "v2", "v3"])
def test_gradcheck_passes_for_every_variant(variant):
    for seed in (0, 1):
        report = gradcheck(variant=variant, seed=seed, shape=(1, 2, 4, 4))
        assert report["max_rel_err"] < 1e-3, report
        assert report["rel_err_x"] < 1e-3
        assert report["rel_err_weights"] < 1e-3
        assert report["rel_err_offsets"] < 1e-3
        if variant == "v1":
            assert "rel_err_modulation" not in report
        else:
            assert report["rel_err_modulation"] < 1e-3


def test_gradcheck_grouped_case():
    report = gradcheck(variant="v3", seed=5, shape=(1, 4, 4, 4), groups=2)
    assert report["max_rel_err"] < 1e-3, report


def test_backward_validation_errors():
    x = Tensor.zeros((1, 2, 4, 4))
    params = DeformParams(kernel=3, weights=np.ones(9))
    off = Tensor.zeros((1, 18, 4, 4))
    up = Tensor.zeros((1, 2, 4, 4))
    with pytest.raises(ValueError):
        deform_backward("v7", x, params, off, None, up)
    with pytest.raises(ValueError):
        deform_backward("v1", x, params, off, Tensor.zeros((1, 9, 4, 4)), up)
    with pytest.raises(ValueError):
        deform_backward("v2", x, params, off, Tensor.zeros((1, 8, 4, 4)), up)
    with pytest.raises(ValueError):
        deform_backward("v1", x, params, off, None, Tensor.zeros((1, 2, 3, 4)))
    with pytest.raises(TypeError):
        deform_backward("v1", x, params, off, None, np.zeros((1, 2, 4, 4)))


def test_backward_gradients_cover_every_input_pixel_reached():
    # scattered input gradient must vanish exactly where no tap ever lands
    x = Tensor(np.random.default_rng(4).normal(size=(1, 1, 5, 5)))
    params = DeformParams(kernel=1, weights=[1.0])
    off = np.zeros((1, 2, 5, 5), dtype=np.float32)  # identity sampling
    up = Tensor(np.eye(5, dtype=np.float32).reshape(1, 1, 5, 5))
    g = deform_backward("v1", x, params, Tensor(off), None, up)
    assert np.array_equal(g.x[0, 0], np.eye(5))
