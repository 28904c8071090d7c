import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from conftest import check_op_grads, numeric_grad, rel_err
from wegs import tensor as T
from wegs.geometry import Camera
from wegs.losses import (
    LossWeights,
    SizeError,
    TrainingDivergenceError,
    masked_photometric,
    reg_mask,
    reg_transient_gaussians,
    ssim,
    total_loss,
    transient_indicator,
)
from wegs.tensor import DimensionError, Param, Tape, Tensor


def ref_ssim(a, b):
    return structural_similarity(
        a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0, channel_axis=2
    )


def test_ssim_identity_and_symmetry(rng):
    a, b = rng.uniform(0, 1, (20, 24, 3)), rng.uniform(0, 1, (20, 24, 3))
    assert ssim(a, a).data == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b).data == pytest.approx(ssim(b, a).data, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_reference(seed):
    r = np.random.default_rng(seed)
    a = r.uniform(0, 1, (32, 40, 3))
    b = np.clip(a + r.normal(0, 0.2, a.shape), 0, 1)
    assert abs(float(ssim(a, b).data) - ref_ssim(a, b)) < 1e-4


def test_ssim_too_small():
    with pytest.raises(SizeError):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def test_ssim_grad():
    r = np.random.default_rng(0)
    a, b = r.uniform(0.2, 0.8, (16, 16, 3)), r.uniform(0.2, 0.8, (16, 16, 3))
    assert check_op_grads(lambda x, y: ssim(x, y), [a, b], h=1e-4) < 1e-3


def test_masked_photometric_examples(rng):
    gt = rng.uniform(0, 0.8, (16, 16, 3))
    m = rng.uniform(0.1, 0.9, (16, 16))
    assert masked_photometric(gt, gt, m).data == 0
    assert masked_photometric(rng.uniform(0, 1, gt.shape), gt, np.zeros((16, 16))).data == pytest.approx(0, abs=1e-12)
    render = gt + 0.1
    full = float(masked_photometric(render, gt, np.ones((16, 16))).data)
    l1_only = float(masked_photometric(render, gt, np.ones((16, 16)), LossWeights(w_ssim=0)).data)
    assert l1_only == pytest.approx(0.08, abs=1e-9)  # float64 inputs stay float64
    assert full == pytest.approx(0.08 + 0.2 * (1 - ref_ssim(render, gt)), abs=1e-4)


def test_masked_photometric_shape_error():
    with pytest.raises(DimensionError):
        masked_photometric(np.zeros((16, 16, 3)), np.zeros((16, 16, 3)), np.ones((8, 8)))


def test_masked_photometric_grads():
    r = np.random.default_rng(1)
    gt = r.uniform(0, 1, (16, 16, 3))
    render = gt + r.choice([-1, 1], gt.shape) * r.uniform(0.05, 0.2, gt.shape)
    m = r.uniform(0.2, 0.9, (16, 16))
    assert check_op_grads(lambda x, mm: masked_photometric(x, gt, mm), [render, m], h=1e-4) < 1e-3


def test_render_grad_vanishes_where_mask_is_zero():
    r = np.random.default_rng(2)
    render = Param(r.uniform(0, 1, (16, 16, 3)))
    m = np.ones((16, 16))
    m[3:9, 4:10] = 0
    with Tape() as tape:
        tape.backward(masked_photometric(render, r.uniform(0, 1, (16, 16, 3)), m))
    assert np.all(render.grad[3:9, 4:10] == 0)
    assert np.any(render.grad[12:, 12:] != 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_masked_photometric_nonnegative(seed):
    r = np.random.default_rng(seed)
    v = masked_photometric(r.uniform(0, 1, (12, 12, 3)), r.uniform(0, 1, (12, 12, 3)), r.uniform(0, 1, (12, 12)))
    assert v.data >= -1e-12


def test_reg_mask_values():
    assert reg_mask(np.ones((4, 4))).data == 0
    assert reg_mask(np.zeros((4, 4))).data == 1
    assert reg_mask(np.full((4, 4), 0.5)).data == 0.25
    assert reg_mask(np.full((4, 4), 0.5), "sum").data == 4.0


def test_reg_mask_grad():
    m = np.random.default_rng(0).uniform(0, 1, (8, 8))
    assert check_op_grads(reg_mask, [m]) < 1e-3


# ---- transient-Gaussian penalty


def front_cam():
    return Camera(10, 10, 4, 4, 9, 9, np.eye(4))


def test_reg_ts_examples():
    cam = front_cam()
    mask = np.ones((9, 9))
    mask[4, 4] = 0.1
    means = np.array([[0, 0, 2.0], [0.8, 0, 2.0], [0, 0, -2.0]])
    assert list(transient_indicator(means, cam, mask, 0.5)) == [True, False, False]
    v = reg_transient_gaussians(np.array([0.3, 0.9, 0.8]), means, cam, mask)
    assert float(v.data) == pytest.approx(0.3)
    assert float(reg_transient_gaussians(np.array([0.3, 0.9, 0.8]), means, cam, np.ones((9, 9))).data) == 0


def test_reg_ts_behind_and_outside():
    cam = front_cam()
    mask = np.zeros((9, 9))
    means = np.array([[0, 0, -1.0], [100, 0, 2.0], [0, 0, 0.05]])
    assert not transient_indicator(means, cam, mask, 0.5).any()


def test_reg_ts_grad_only_wrt_opacity():
    cam = front_cam()
    mask = np.zeros((9, 9))
    alpha = Param(np.array([0.2, 0.4]))
    means = np.array([[0, 0, 2.0], [5.0, 0, 1.0]])
    with Tape() as tape:
        tape.backward(reg_transient_gaussians(alpha, means, cam, mask))
    np.testing.assert_array_equal(alpha.grad, [1, 0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_reg_ts_monotone(seed):
    r = np.random.default_rng(seed)
    cam = front_cam()
    means = np.column_stack([r.uniform(-1, 1, (6, 2)), r.uniform(0.5, 3, 6)])
    mask = r.uniform(0, 1, (9, 9))
    a = r.uniform(0, 1, 6)
    base = float(reg_transient_gaussians(a, means, cam, mask).data)
    i = r.integers(6)
    a[i] += 0.1
    assert float(reg_transient_gaussians(a, means, cam, mask).data) >= base


# ---- total


def test_total_loss():
    w = LossWeights()
    comps = {"photometric": Tensor(0.5), "reg_mask": Tensor(2.0), "reg_sh": Tensor(3.0), "reg_ts": Tensor(4.0)}
    assert float(total_loss(comps, w).data) == pytest.approx(0.5 + 1e-5 * 2 + 0.1 * 3 + 1e-5 * 4)
    assert float(total_loss({"photometric": Tensor(0.5)}, w).data) == 0.5
    assert float(total_loss({**comps, "reg_sh": Tensor(0.0), "reg_mask": Tensor(0.0), "reg_ts": Tensor(0.0)}, w).data) == 0.5


def test_total_loss_pure_l1():
    w = LossWeights(w_ssim=0, w_regM=0, w_regSH=0, w_regTS=0)
    r = np.random.default_rng(0)
    a, b = r.uniform(0, 1, (12, 12, 3)), r.uniform(0, 1, (12, 12, 3))
    comps = {"photometric": masked_photometric(a, b, np.ones((12, 12)), w), "reg_mask": Tensor(5.0)}
    assert float(total_loss(comps, w).data) == pytest.approx(0.8 * np.mean(np.abs(a - b)))


def test_total_loss_divergence_names_term():
    with pytest.raises(TrainingDivergenceError, match="reg_sh"):
        total_loss({"photometric": Tensor(0.1), "reg_sh": Tensor(np.nan)}, LossWeights())


def test_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(w_l1=-1)
    with pytest.raises(ValueError):
        LossWeights(eps=1.0)
