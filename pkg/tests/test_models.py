import numpy as np
import pytest

from progkd import tensor as T
from progkd.models import (Detection, Detector, DetectorSpec, Projector, Scale, box_iou, decode_predictions,
                           detect, nms)
from progkd.tensor import ShapeError, Tensor


def images(n=2, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 3, 64, 64)).astype(np.float32)


@pytest.mark.parametrize("scale", list(Scale))
def test_feature_and_prediction_shapes(scale):
    model = Detector(DetectorSpec(scale))
    out = model(images())
    c = scale.base_channels
    assert [f.shape for f in out.levels] == [(2, c, 16, 16), (2, 2 * c, 8, 8), (2, 4 * c, 4, 4)]
    assert [p.shape for p in out.predictions] == [(2, 8, 16, 16), (2, 8, 8, 8), (2, 8, 4, 4)]


def test_parameter_counts_ordered():
    counts = [Detector(DetectorSpec(s)).parameter_count() for s in (Scale.TINY, Scale.JUNIOR, Scale.SENIOR)]
    assert counts[0] < counts[1] < counts[2]


def test_bad_input_shape():
    with pytest.raises(ShapeError):
        Detector(DetectorSpec(Scale.TINY))(np.zeros((1, 3, 32, 32), np.float32))
    with pytest.raises(ValueError):
        DetectorSpec(Scale.TINY, num_classes=0)


def test_same_seed_same_weights_and_outputs():
    a, b = Detector(DetectorSpec(Scale.TINY, seed=3)), Detector(DetectorSpec(Scale.TINY, seed=3))
    c = Detector(DetectorSpec(Scale.TINY, seed=4))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)
    x = images()
    np.testing.assert_array_equal(a(x).predictions[0].data, b(x).predictions[0].data)


def test_initial_objectness_is_low():
    out = Detector(DetectorSpec(Scale.JUNIOR))(images())
    probs = 1 / (1 + np.exp(-out.predictions[0].data[:, 0]))
    assert probs.max() < 0.1


def test_state_dict_round_trip_and_errors():
    a, b = Detector(DetectorSpec(Scale.TINY, seed=1)), Detector(DetectorSpec(Scale.TINY, seed=2))
    b.load_state_dict(a.state_dict("student."), "student.")
    x = images()
    np.testing.assert_array_equal(a(x).levels[2].data, b(x).levels[2].data)
    with pytest.raises(KeyError):
        b.load_state_dict({}, "")
    with pytest.raises(ShapeError):
        b.load_state_dict(Detector(DetectorSpec(Scale.JUNIOR)).state_dict())


def test_freeze_marks_all_parameters():
    m = Detector(DetectorSpec(Scale.TINY))
    m.freeze()
    assert all(p.frozen for p in m.parameters())
    m.freeze(False)
    assert not any(p.frozen for p in m.parameters())


# ----------------------------------------------------------------------------
# projector


def test_projector_identity_when_widths_match():
    feats = [Tensor(np.random.default_rng(i).normal(size=(2, w, 4, 4)).astype(np.float32))
             for i, w in enumerate((16, 32, 64))]
    out = Projector((16, 32, 64), (16, 32, 64))(feats)
    for f, o in zip(feats, out):
        np.testing.assert_array_equal(o.data, f.data)


def test_projector_widens_and_copies_overlap():
    f = Tensor(np.random.default_rng(0).normal(size=(1, 16, 4, 4)).astype(np.float32))
    out = Projector((16,), (32,))([f])[0]
    assert out.shape == (1, 32, 4, 4)
    np.testing.assert_allclose(out.data[:, :16], f.data, atol=1e-6)
    assert np.abs(out.data[:, 16:]).max() < 0.5


def test_projector_skips_levels_and_checks_width():
    p = Projector((16, 32, 64), (32, 64, 128))
    feats = [Tensor(np.zeros((1, w, 2, 2), np.float32)) for w in (16, 32, 64)]
    out = p(feats, levels=[1])
    assert out[0] is None and out[2] is None and out[1].shape == (1, 64, 2, 2)
    with pytest.raises(ShapeError):
        p([Tensor(np.zeros((1, 8, 2, 2), np.float32))] * 3)
    with pytest.raises(ValueError):
        Projector((16,), (32, 64))


def test_gradient_reaches_projector():
    learner, teacher = Detector(DetectorSpec(Scale.TINY)), Detector(DetectorSpec(Scale.JUNIOR))
    proj = Projector.between(learner, teacher)
    x = images(1)
    with T.no_record():
        target = teacher(x).levels[0]
    with T.GradTape() as tape:
        projected = proj(learner(x).levels, [0])[0]
        loss = T.mean(T.square(projected - target))
    T.backward(loss, tape)
    assert np.abs(proj.params["p3.weight"].grad).max() > 0
    assert proj.params["p4.weight"].grad is None or not np.any(proj.params["p4.weight"].grad)


# ----------------------------------------------------------------------------
# decoding and suppression


def pred_maps(fill=-10.0):
    return [np.full((1, 8, 64 // s, 64 // s), fill) for s in (4, 8, 16)]


def test_decode_all_low_is_empty():
    assert decode_predictions(pred_maps(), conf_threshold=0.25) == [[]]


def test_decode_single_cell_box():
    maps = pred_maps()
    maps[1][0, 0, 2, 3] = 10.0       # P4 cell, centre (28, 20)
    maps[1][0, 2, 2, 3] = 10.0       # class 1
    maps[1][0, 4:, 2, 3] = np.log([0.5, 1.0, 1.5, 2.0])
    dets = decode_predictions(maps, conf_threshold=0.5)[0]
    assert len(dets) == 1
    d = dets[0]
    assert d.cls == 1
    assert d.score == pytest.approx((1 / (1 + np.exp(-10))) ** 2)
    np.testing.assert_allclose(d.box, (24.0, 12.0, 40.0, 36.0))


def test_decode_clips_to_image():
    maps = pred_maps()
    maps[2][0, 0, 0, 0] = 10.0
    maps[2][0, 1, 0, 0] = 10.0
    maps[2][0, 4:, 0, 0] = np.log(4.0)
    # P5 cell centre (8, 8) with 64-pixel extents reaches past every border
    box = decode_predictions(maps, conf_threshold=0.5)[0][0].box
    assert box == (0.0, 0.0, 64.0, 64.0)


def test_decode_threshold_validation():
    with pytest.raises(ValueError):
        decode_predictions(pred_maps(), conf_threshold=1.5)


def test_box_iou_values():
    iou = box_iou(np.array([[0, 0, 10, 10]]), np.array([[0, 0, 10, 10], [5, 0, 15, 10], [20, 20, 30, 30],
                                                        [0, 0, 0, 0]]))
    np.testing.assert_allclose(iou[0], [1.0, 1 / 3, 0.0, 0.0])


def test_nms_keeps_best_of_overlapping_same_class():
    dets = [Detection((0, 0, 10, 10), 0, 0.9), Detection((1, 1, 11, 11), 0, 0.8),
            Detection((1, 1, 11, 11), 1, 0.7), Detection((30, 30, 40, 40), 0, 0.6)]
    kept = nms(dets, 0.5)
    assert [(d.cls, d.score) for d in kept] == [(0, 0.9), (1, 0.7), (0, 0.6)]
    assert len(nms(dets, 1.0)) == 4
    with pytest.raises(ValueError):
        nms(dets, 0.0)


def test_nms_threshold_boundary():
    dets = [Detection((0, 0, 10, 10), 0, 0.9), Detection((5, 0, 15, 10), 0, 0.5)]
    assert len(nms(dets, 1 / 3 + 1e-9)) == 2
    assert len(nms(dets, 0.3)) == 1


def test_detect_is_deterministic():
    m = Detector(DetectorSpec(Scale.TINY, seed=5))
    x = images(3, seed=1)
    a, b = detect(m, x, conf_threshold=0.0), detect(m, x, conf_threshold=0.0)
    assert len(a) == 3
    assert [[(d.box, d.cls, d.score) for d in row] for row in a] == \
           [[(d.box, d.cls, d.score) for d in row] for row in b]
