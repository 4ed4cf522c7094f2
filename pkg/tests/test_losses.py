import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import check, sample_coords
from progkd import tensor as T
from progkd.losses import (LEVEL_STRIDES, DistillLossConfig, LossKind, assign_level, box_iou_loss, build_targets,
                           detection_loss, distill_distance, mse_distance, spectral_distance, ssim_distance,
                           stage_objective)
from progkd.tensor import ShapeError, Tensor

SEEDS = range(5)
N_OUT = 1 + 3 + 4

fmaps = arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(2, 6), st.integers(2, 6)),
               elements=st.floats(-3, 3, allow_nan=False))


def spectral(lambda_amp=0.0):
    return DistillLossConfig(LossKind.SPECTRAL_PHASE, lambda_amp=lambda_amp)


def empty_predictions(n=1, fill=-10.0):
    return [Tensor(np.full((n, N_OUT, 64 // s, 64 // s), fill)) for s in LEVEL_STRIDES]


# ----------------------------------------------------------------------------
# config


def test_config_validation():
    assert DistillLossConfig().active_levels == [0, 1, 2]
    assert DistillLossConfig(layers=(True, False, False)).active_levels == [0]
    with pytest.raises(ValueError):
        DistillLossConfig(lambda_kd=-1.0)
    with pytest.raises(ValueError):
        DistillLossConfig(lambda_amp=-0.5)
    with pytest.raises(ValueError):
        DistillLossConfig(layers=(False, False, False))
    DistillLossConfig(layers=(False, False, False), lambda_kd=0.0)


# ----------------------------------------------------------------------------
# distances: values


def test_mse_example():
    assert mse_distance(np.array([0.0, 0.0]), np.array([3.0, 4.0])).item() == 12.5
    with pytest.raises(ShapeError):
        mse_distance(np.zeros(2), np.zeros(3))


def test_ssim_identical_and_negated():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 3, 6, 6))
    assert ssim_distance(a, a).item() == pytest.approx(0.0, abs=1e-6)
    a0 = a - a.mean(axis=(2, 3), keepdims=True)
    d = ssim_distance(a0, -a0).item()
    assert 1.0 < d <= 2.0
    with pytest.raises(ShapeError):
        ssim_distance(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))
    with pytest.raises(ShapeError):
        ssim_distance(np.zeros((4, 4)), np.zeros((4, 4)))


def ssim_reference(a, b):
    """Per-map SSIM written with plain numpy statistics."""
    dyn = max(np.abs(a).max(), np.abs(b).max(), 1.0)
    c1, c2 = (0.01 * dyn) ** 2, (0.03 * dyn) ** 2
    vals = []
    for x, y in zip(a.reshape(-1, *a.shape[2:]), b.reshape(-1, *b.shape[2:])):
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cov = ((x - mx) * (y - my)).mean()
        vals.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return 1.0 - np.mean(vals)


@pytest.mark.parametrize("seed", SEEDS)
def test_ssim_matches_reference(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(2, 3, 5, 4)) * 2
    assert ssim_distance(a, b).item() == pytest.approx(ssim_reference(a, b), abs=1e-8)


def spectral_reference(t, s, lambda_amp):
    """Unit-phase and log-amplitude distance using numpy's FFT."""
    ft, fs = np.fft.fft2(t), np.fft.fft2(s)

    def unit(z):
        return z / np.maximum(np.abs(z), 1e-8)

    phase = np.mean(np.abs(unit(ft) - unit(fs)) ** 2)
    amp = np.mean((np.log1p(np.abs(ft)) - np.log1p(np.abs(fs))) ** 2)
    return phase + lambda_amp * amp


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("lambda_amp", [0.0, 0.5])
def test_spectral_matches_numpy_fft(seed, lambda_amp):
    rng = np.random.default_rng(seed)
    t, s = rng.normal(size=(2, 3, 8, 6)), rng.normal(size=(2, 3, 8, 6))
    got = spectral_distance(t, s, spectral(lambda_amp)).item()
    assert got == pytest.approx(spectral_reference(t, s, lambda_amp), rel=1e-6)


def test_spectral_identical_and_scaled():
    t = np.random.default_rng(1).normal(size=(1, 4, 8, 8))
    assert spectral_distance(t, t).item() == pytest.approx(0.0, abs=1e-6)
    for alpha in (0.1, 3.0, 50.0):
        assert spectral_distance(t, alpha * t).item() == pytest.approx(0.0, abs=1e-5)
    assert spectral_distance(t, 2.0 * t, spectral(1.0)).item() > 1e-3
    with pytest.raises(ShapeError):
        spectral_distance(t, t[..., :4])


def test_spectral_offset_moves_only_dc():
    rng = np.random.default_rng(2)
    t = rng.uniform(0.5, 1.5, size=(1, 2, 8, 8))
    s = rng.uniform(0.5, 1.5, size=(1, 2, 8, 8))
    # positive maps keep the DC bin on the positive real axis for both arguments
    base = spectral_distance(t, s).item()
    assert spectral_distance(t + 4.0, s + 4.0).item() == pytest.approx(base, abs=1e-4)


@given(fmaps, fmaps)
def test_distances_non_negative(a, b):
    b = np.resize(b, a.shape)
    assert mse_distance(a, b).item() >= 0
    assert ssim_distance(a, b).item() >= -1e-9
    assert spectral_distance(a, b).item() >= 0
    assert mse_distance(a, a).item() == 0


@settings(max_examples=25)
@given(fmaps, st.floats(0.01, 100))
def test_spectral_scale_invariance_property(t, alpha):
    s = np.random.default_rng(0).normal(size=t.shape)
    base = spectral_distance(t, s).item()
    assert spectral_distance(alpha * t, s).item() == pytest.approx(base, abs=1e-5)
    assert spectral_distance(t, alpha * s).item() == pytest.approx(base, abs=1e-5)


def test_distill_distance_dispatch_detaches_teacher():
    rng = np.random.default_rng(3)
    teacher = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    student = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    for kind in LossKind:
        teacher.grad = student.grad = None
        with T.GradTape() as tape:
            out = distill_distance(teacher, student, DistillLossConfig(kind))
        T.backward(out, tape)
        assert teacher.grad is None or not np.any(teacher.grad)
        assert np.any(student.grad)


# ----------------------------------------------------------------------------
# distances: gradients


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_mse(seed):
    rng = np.random.default_rng(100 + seed)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    check(lambda x, y: mse_distance(x, y), a, b, rtol=1e-4)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_ssim(seed):
    rng = np.random.default_rng(110 + seed)
    # below 1 in magnitude the dynamic range is pinned at 1, a true constant
    a, b = rng.uniform(-0.95, 0.95, size=(2, 1, 2, 6, 6))
    check(lambda x, y: ssim_distance(x, y), a, b)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("lambda_amp", [0.0, 0.7])
def test_grad_spectral(seed, lambda_amp):
    rng = np.random.default_rng(120 + seed)
    t, s = rng.normal(size=(1, 2, 8, 8)), rng.normal(size=(1, 2, 8, 8))
    # weak bins make unit phase sharply curved, so the difference step must be small
    check(lambda x: spectral_distance(t, x, spectral(lambda_amp)), s, step=1e-5)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_box_iou_loss(seed):
    rng = np.random.default_rng(130 + seed)
    raw = rng.normal(scale=0.3, size=(5, 4))
    tgt = rng.uniform(1.0, 12.0, size=(5, 4))
    check(lambda r: box_iou_loss(r, tgt, 4.0), raw)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_detection_loss(seed):
    rng = np.random.default_rng(140 + seed)
    boxes = [np.array([[10.0, 12.0, 16.0, 17.0, 1.0], [20.0, 20.0, 40.0, 44.0, 2.0]]),
             np.array([[30.0, 5.0, 41.0, 14.0, 0.0]])]
    targets = build_targets(boxes)
    preds = [rng.normal(scale=0.5, size=(2, N_OUT, 64 // s, 64 // s)) for s in LEVEL_STRIDES]
    # every channel of every positive cell, plus random background entries
    coords = []
    for lvl, (p, tg) in enumerate(zip(preds, targets)):
        cells = {(n, c, i, j) for n, i, j in zip(*tg.index) for c in range(N_OUT)}
        cells |= set(map(tuple, sample_coords([p], 60, seed=lvl)[0]))
        coords.append(sorted(cells))
    check(lambda a, b, c: detection_loss([a, b, c], targets), *preds, coords=coords)


# ----------------------------------------------------------------------------
# stage objective


def test_stage_objective_cases():
    task = Tensor(2.0)
    terms = [Tensor(1.0), Tensor(1.0), Tensor(1.0)]
    assert stage_objective(task, terms, DistillLossConfig(lambda_kd=0.0)).item() == 2.0
    assert stage_objective(task, terms, DistillLossConfig(lambda_kd=0.5)).item() == pytest.approx(2.5)
    p3_only = DistillLossConfig(layers=(True, False, False), lambda_kd=2.0)
    assert stage_objective(task, [Tensor(0.25), None, None], p3_only).item() == pytest.approx(2.5)
    mixed = DistillLossConfig(layers=(True, False, True), lambda_kd=1.0)
    assert stage_objective(task, [Tensor(1.0), Tensor(100.0), Tensor(3.0)], mixed).item() == pytest.approx(4.0)


# ----------------------------------------------------------------------------
# detection targets and loss


def test_assign_level_by_size():
    assert assign_level(6, 7) == 0
    assert assign_level(8, 4) == 1
    assert assign_level(15.9, 3) == 1
    assert assign_level(16, 16) == 2


def test_build_targets_single_box():
    # a 12x12 box maps to P4 (stride 8); cell centres 12, 20, 28 ... along each axis
    tg = build_targets([np.array([[10.0, 10.0, 22.0, 22.0, 2.0]])])
    assert not tg[0].positive.any() and not tg[2].positive.any()
    assert sorted(zip(*np.nonzero(tg[1].positive[0]))) == [(1, 1), (1, 2), (2, 1), (2, 2)]
    assert set(tg[1].cls) == {2}
    k = list(zip(tg[1].index[1], tg[1].index[2])).index((1, 1))
    np.testing.assert_allclose(tg[1].ltrb[k], [2.0, 2.0, 10.0, 10.0])


def test_build_targets_tiny_box_gets_nearest_cell():
    tg = build_targets([np.array([[5.0, 5.0, 6.5, 6.5, 0.0]])])
    assert tg[0].positive.sum() == 1
    assert tg[0].positive[0, 1, 1]


def test_build_targets_overlap_goes_to_smaller_box():
    boxes = np.array([[0.0, 0.0, 15.0, 15.0, 0.0], [4.0, 4.0, 14.0, 14.0, 1.0]])
    tg = build_targets([boxes])
    p = tg[1]
    assert p.positive[0, 1, 1]
    k = list(zip(p.index[1], p.index[2])).index((1, 1))
    assert p.cls[k] == 1


def test_empty_image_loss_is_tiny():
    loss = detection_loss(empty_predictions(), [np.zeros((0, 5))])
    assert 0 <= loss.item() < 1e-3
    assert loss.item() == pytest.approx(np.log1p(np.exp(-10.0)), rel=1e-6)


def test_perfect_prediction_loss_is_tiny():
    boxes = [np.array([[10.0, 10.0, 22.0, 22.0, 2.0]])]
    targets = build_targets(boxes)
    preds = [np.full((1, N_OUT, 64 // s, 64 // s), -20.0) for s in LEVEL_STRIDES]
    for lvl, tg in enumerate(targets):
        for p, (n, i, j) in enumerate(zip(*tg.index)):
            preds[lvl][n, 0, i, j] = 20.0
            preds[lvl][n, 1 + tg.cls[p], i, j] = 20.0
            preds[lvl][n, 4:, i, j] = np.log(tg.ltrb[p] / LEVEL_STRIDES[lvl])
    loss = detection_loss([Tensor(p) for p in preds], targets).item()
    assert 0 <= loss < 0.01


def test_detection_loss_rejects_wrong_channels():
    preds = [Tensor(np.zeros((1, 5, 64 // s, 64 // s))) for s in LEVEL_STRIDES]
    with pytest.raises(ShapeError):
        detection_loss(preds, [np.zeros((0, 5))])


@settings(max_examples=20)
@given(st.integers(0, 2**31))
def test_detection_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    preds = [Tensor(rng.normal(scale=3.0, size=(1, N_OUT, 64 // s, 64 // s))) for s in LEVEL_STRIDES]
    x0, y0 = rng.uniform(0, 40, size=2)
    w, h = rng.uniform(3, 24, size=2)
    boxes = [np.array([[x0, y0, x0 + w, y0 + h, rng.integers(3)]])]
    assert detection_loss(preds, boxes).item() >= 0
