import numpy as np
import pytest

from progkd import distill as D
from progkd.distill import (ConfigError, EpochRecord, MetricsLog, PipelineConfig, StageConfig, distill_stage,
                            evaluate, load_detector, mse_loss, parse_manifest, progressive_pipeline, save_detector,
                            spectral_loss, teacher_feature_rms, train_scratch)
from progkd.losses import DistillLossConfig, LossKind
from progkd.models import Detector, DetectorSpec, Scale
from progkd.synthdata import in_memory_dataset


@pytest.fixture(scope="module")
def data():
    return in_memory_dataset(16, 8, seed=2)


def quick(scale=Scale.TINY, **kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("batch_size", 8)
    return StageConfig(scale, **kw)


def test_stage_config_validation():
    with pytest.raises(ConfigError):
        StageConfig(epochs=0)
    with pytest.raises(ConfigError):
        StageConfig(batch_size=0)
    with pytest.raises(ConfigError):
        StageConfig(lr0=0.0)
    assert StageConfig("junior").learner_scale is Scale.JUNIOR


def test_first_epoch_uses_lr0_then_decays(data):
    log = train_scratch(Scale.TINY, data, quick(epochs=3)).log
    lrs = log.column("lr")
    assert lrs[0] == 0.001
    assert lrs[0] > lrs[1] > lrs[2] > 0


def test_scratch_training_is_deterministic(data):
    a = train_scratch(Scale.TINY, data, quick(seed=4))
    b = train_scratch(Scale.TINY, data, quick(seed=4))
    assert a.log.to_csv() == b.log.to_csv()
    assert D.params_digest(a.model) == D.params_digest(b.model)
    c = train_scratch(Scale.TINY, data, quick(seed=5))
    assert D.params_digest(c.model) != D.params_digest(a.model)


def test_training_moves_parameters_and_loss_falls(data):
    res = train_scratch(Scale.TINY, data, quick(epochs=4, lr0=0.003))
    fresh = Detector(DetectorSpec(Scale.TINY))
    assert D.params_digest(res.model) != D.params_digest(fresh)
    task = res.log.column("task_loss")
    assert task[-1] < task[0]


def test_teacher_is_left_untouched(data):
    teacher = Detector(DetectorSpec(Scale.JUNIOR, seed=9))
    before = D.params_digest(teacher)
    res = distill_stage(quick(loss=spectral_loss()), data, teacher=teacher)
    assert res.teacher_digest == (before, before)
    assert D.params_digest(teacher) == before
    assert all(p.frozen for p in teacher.parameters())
    assert res.projector is not None


def test_kd_vanishes_when_teacher_matches_learner(data):
    # same scale and seed: the learner starts as a copy of the teacher and the
    # projector starts as the identity, so there is nothing to distil
    teacher = Detector(DetectorSpec(Scale.TINY, seed=0))
    for loss in (mse_loss(), spectral_loss(), DistillLossConfig(LossKind.FEATURE_SSIM)):
        cfg = quick(loss=loss, include_task_loss=False, seed=0)
        log = distill_stage(cfg, data, teacher=teacher).log
        for col in ("kd_p3", "kd_p4", "kd_p5"):
            assert np.abs(log.column(col)).max() < 1e-6


def test_inactive_levels_report_zero(data):
    teacher = Detector(DetectorSpec(Scale.JUNIOR, seed=1))
    log = distill_stage(quick(loss=spectral_loss((False, True, False))), data, teacher=teacher).log
    assert np.all(log.column("kd_p3") == 0) and np.all(log.column("kd_p5") == 0)
    assert np.all(log.column("kd_p4") > 0)


def test_stage_errors(data, tmp_path):
    with pytest.raises(ConfigError, match="needs a teacher"):
        distill_stage(quick(), data)
    with pytest.raises(ConfigError, match="smaller"):
        distill_stage(quick(Scale.SENIOR), data, teacher=Detector(DetectorSpec(Scale.TINY)))
    with pytest.raises(ConfigError):
        D._fit(Detector(DetectorSpec(Scale.TINY)), data, quick(include_task_loss=False))
    with pytest.raises(Exception, match="nothing.ckpt"):
        distill_stage(quick(teacher_ckpt=str(tmp_path / "nothing.ckpt")), data)


def test_teacher_feature_rms_matches_numpy(data):
    teacher = Detector(DetectorSpec(Scale.JUNIOR, seed=3))
    levels = teacher(data.train.images).levels
    expected = [float(np.sqrt(np.mean(np.square(f.data, dtype=np.float64)))) for f in levels]
    np.testing.assert_allclose(teacher_feature_rms(teacher, data.train.images, batch_size=5), expected, rtol=1e-6)


def test_checkpoint_round_trip_and_evaluate_by_path(data, tmp_path):
    res = train_scratch(Scale.TINY, data, quick())
    path = tmp_path / "m.ckpt"
    save_detector(path, res.model)
    back = load_detector(path)
    assert back.spec.scale is Scale.TINY
    assert D.params_digest(back) == D.params_digest(res.model)
    assert evaluate(path, data.test).map == evaluate(res.model, data.test).map
    with pytest.raises(ValueError):
        evaluate(res.model, data.test.__class__(data.test.images[:0], [], data.test.domain_ids[:0]))


def test_metrics_log_round_trip():
    log = MetricsLog()
    for e in range(3):
        log.append(EpochRecord(e, 0.1 / (e + 1), 1.0 / 3, 0.0, 0.5, 0.25, 0.1 * e, 0.05, 1 / 7))
    back = MetricsLog.from_csv(log.to_csv())
    assert back.to_csv() == log.to_csv()
    assert back.final.map == 1 / 7
    with pytest.raises(ValueError):
        log.append(EpochRecord(7, 0, 0, 0, 0, 0, 0, 0, 0))


@pytest.mark.parametrize("direct", [False, True])
def test_pipeline_outputs_and_manifest(data, tmp_path, direct):
    cfg = PipelineConfig(senior=quick(Scale.SENIOR, epochs=1), junior=quick(Scale.JUNIOR, epochs=1),
                         student=quick(Scale.TINY, epochs=1, loss=spectral_loss()), direct=direct)
    result = progressive_pipeline(data, cfg, tmp_path)
    stages = parse_manifest((tmp_path / "manifest.txt").read_text())
    names = ["senior", "student"] if direct else ["senior", "junior", "student"]
    assert [s["name"] for s in stages] == names
    assert [s["stage"] for s in stages] == list(range(len(names)))
    assert stages[-1]["teacher"] == ("senior" if direct else "junior")
    assert ("junior_ckpt" in result) is not direct
    student = load_detector(result["student_ckpt"])
    assert student.spec.scale is Scale.TINY
    assert "loss=spectral" in stages[-1]["config"]
    text = (tmp_path / "manifest.txt").read_text()
    assert f"mode={'direct' if direct else 'progressive'}" in text
    assert f"stages={len(names)}" in text


def test_pipeline_wraps_stage_failures(data, tmp_path):
    cfg = PipelineConfig(senior=quick(Scale.TINY, epochs=1), junior=quick(Scale.JUNIOR, epochs=1))
    with pytest.raises(D.StageError, match="junior"):
        progressive_pipeline(data, cfg, tmp_path)
