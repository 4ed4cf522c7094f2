"""Scratch training, single-stage distillation and the progressive pipeline."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .losses import DistillLossConfig, LossKind, build_targets, detection_loss, distill_distance, stage_objective
from .metrics import COCO_IOUS, APResult, average_precision
from .models import Detector, DetectorSpec, Projector, Scale, detect
from .optim import Adam, cosine_lr
from .synthdata import Dataset, Split

log = logging.getLogger(__name__)

DEFAULT_LR0 = 0.001
CHECKPOINT_PREFIX = {Scale.SENIOR: "senior.", Scale.JUNIOR: "junior.", Scale.TINY: "student."}
PROJECTOR_PREFIX = "projector."


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class StageConfig:
    learner_scale: Scale = Scale.TINY
    teacher_ckpt: str | None = None
    loss: DistillLossConfig = field(default_factory=DistillLossConfig)
    epochs: int = 30
    batch_size: int = 32
    lr0: float = DEFAULT_LR0
    seed: int = 0
    include_task_loss: bool = True

    def __post_init__(self):
        object.__setattr__(self, "learner_scale", Scale(self.learner_scale))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    task_loss: float
    kd_p3: float
    kd_p4: float
    kd_p5: float
    ap50: float
    ap75: float
    map: float


@dataclass
class MetricsLog:
    records: list[EpochRecord] = field(default_factory=list)

    FIELDS = ("epoch", "lr", "task_loss", "kd_p3", "kd_p4", "kd_p5", "ap50", "ap75", "map")

    def append(self, rec: EpochRecord) -> None:
        if rec.epoch != len(self.records):
            raise ValueError(f"epoch {rec.epoch} breaks contiguity (expected {len(self.records)})")
        self.records.append(rec)

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.FIELDS)
        for r in self.records:
            writer.writerow([r.epoch] + [repr(float(getattr(r, f))) for f in self.FIELDS[1:]])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "MetricsLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        out = cls()
        for row in rows:
            out.append(EpochRecord(int(row["epoch"]), *(float(row[f]) for f in cls.FIELDS[1:])))
        return out

    @classmethod
    def load(cls, path: str | Path) -> "MetricsLog":
        return cls.from_csv(Path(path).read_text())


@dataclass
class StageResult:
    model: Detector
    log: MetricsLog
    projector: Projector | None = None
    teacher_digest: tuple[str, str] | None = None   # before, after
    seconds: float = 0.0


# ----------------------------------------------------------------------------
# checkpoints


def detector_state(model: Detector, projector: Projector | None = None) -> dict[str, np.ndarray]:
    state = model.state_dict(CHECKPOINT_PREFIX[model.spec.scale])
    if projector is not None:
        state.update(projector.state_dict(PROJECTOR_PREFIX))
    return state


def save_detector(path: str | Path, model: Detector, projector: Projector | None = None) -> None:
    checkpoint.save(path, detector_state(model, projector))


def load_detector(path: str | Path, num_classes: int = 3) -> Detector:
    """Rebuild a detector from a checkpoint; the scale comes from the name prefix."""
    state = checkpoint.load(path)
    for scale, prefix in CHECKPOINT_PREFIX.items():
        if any(k.startswith(prefix) for k in state):
            model = Detector(DetectorSpec(scale, num_classes))
            model.load_state_dict(state, prefix)
            return model
    raise checkpoint.CheckpointError(f"{path}: no detector parameters found")


def params_digest(model: Detector) -> str:
    return checkpoint.digest(model.state_dict())


def code_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


# ----------------------------------------------------------------------------
# training


def evaluate(model: Detector | str | Path, split: Split, iou_thresholds: Sequence[float] = COCO_IOUS,
             conf_threshold: float = 0.05, nms_iou: float = 0.5) -> APResult:
    """COCO-style AP of ``model`` (or a checkpoint path) on ``split``."""
    if not isinstance(model, Detector):
        model = load_detector(model)
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    dets = detect(model, split.images, conf_threshold, nms_iou)
    return average_precision(dets, split.boxes, model.spec.num_classes, iou_thresholds)


def _shuffle_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, 0x5EED]).generate_state(1)[0])


def teacher_levels(teacher: Detector, images: np.ndarray, batch_size: int = 64) -> list[np.ndarray]:
    """Teacher P3-P5 maps for every image, computed once since the teacher is frozen."""
    chunks: list[list[np.ndarray]] = [[], [], []]
    with T.no_record():
        for start in range(0, len(images), batch_size):
            for lvl, f in enumerate(teacher.forward(images[start:start + batch_size]).levels):
                chunks[lvl].append(f.data)
    return [np.concatenate(c) for c in chunks]


def feature_rms(levels: list[np.ndarray]) -> list[float]:
    return [max(float(np.sqrt(np.mean(np.square(f, dtype=np.float64)))), 1e-6) for f in levels]


def teacher_feature_rms(teacher: Detector, images: np.ndarray, batch_size: int = 64) -> list[float]:
    """Root-mean-square activation of each teacher level over ``images``."""
    return feature_rms(teacher_levels(teacher, images, batch_size))


def _fit(learner: Detector, data: Dataset, cfg: StageConfig, teacher: Detector | None = None,
         projector: Projector | None = None, on_epoch: Callable[[EpochRecord], None] | None = None) -> MetricsLog:
    if teacher is None and not cfg.include_task_loss:
        raise ConfigError("a stage without a teacher must include the task loss")
    params = learner.parameters() + (projector.parameters() if projector is not None else [])
    opt = Adam(params)
    levels = cfg.loss.active_levels if teacher is not None else []
    scales = [1.0, 1.0, 1.0]
    cached = teacher_levels(teacher, data.train.images) if teacher is not None else None
    if cached is not None and cfg.loss.normalize:
        scales = feature_rms(cached)
    metrics = MetricsLog()
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        task_sum, kd_sum, n_batches = 0.0, np.zeros(3), 0
        for idx in data.train.batch_indices(cfg.batch_size, shuffle_seed=_shuffle_seed(cfg.seed, epoch)):
            batch = data.train.subset(idx)
            targets = [T.Tensor(f[idx]) for f in cached] if cached is not None else None
            opt.zero_grad()
            with T.GradTape() as tape:
                out = learner.forward(batch.images)
                task = detection_loss(out.predictions, build_targets(batch.boxes)) \
                    if cfg.include_task_loss else T.Tensor(np.float32(0.0))
                if teacher is not None:
                    projected = projector.project(out.levels, levels)
                    terms: list = [None, None, None]
                    for lvl in levels:
                        inv = 1.0 / scales[lvl]
                        terms[lvl] = distill_distance(targets[lvl] * inv, projected[lvl] * inv, cfg.loss)
                        kd_sum[lvl] += terms[lvl].item()
                    loss = stage_objective(task, terms, cfg.loss)
                else:
                    loss = task
            T.backward(loss, tape)
            opt.step(lr)
            task_sum += task.item()
            n_batches += 1
        ap = evaluate(learner, data.test)
        kd = kd_sum / max(n_batches, 1)
        rec = EpochRecord(epoch, lr, task_sum / max(n_batches, 1), *kd, ap.ap50, ap.ap75, ap.map)
        metrics.append(rec)
        log.info("epoch %d lr %.6f task %.4f kd %s ap50 %.4f map %.4f", epoch, lr, rec.task_loss,
                 np.round(kd, 4).tolist(), ap.ap50, ap.map)
        if on_epoch is not None:
            on_epoch(rec)
    return metrics


def train_scratch(scale: Scale | str, data: Dataset, cfg: StageConfig | None = None, **kw) -> StageResult:
    """Train a detector on the detection loss alone."""
    cfg = cfg or StageConfig(Scale(scale))
    cfg = replace(cfg, learner_scale=Scale(scale), loss=replace(cfg.loss, lambda_kd=0.0), include_task_loss=True)
    start = time.perf_counter()
    model = Detector(DetectorSpec(cfg.learner_scale, seed=cfg.seed))
    metrics = _fit(model, data, cfg, **kw)
    return StageResult(model, metrics, seconds=time.perf_counter() - start)


def distill_stage(cfg: StageConfig, data: Dataset, teacher: Detector | None = None, **kw) -> StageResult:
    """Train a learner plus a fresh projector against a frozen teacher.

    The teacher comes from ``teacher`` or ``cfg.teacher_ckpt``. It must not be
    smaller than the learner.

    Raises:
        ConfigError: No teacher, or the teacher is smaller than the learner.
    """
    if teacher is None:
        if cfg.teacher_ckpt is None:
            raise ConfigError("distill_stage needs a teacher model or checkpoint")
        teacher = load_detector(cfg.teacher_ckpt)
    if teacher.spec.scale.rank < cfg.learner_scale.rank:
        raise ConfigError(f"teacher scale {teacher.spec.scale.value} is smaller than learner "
                          f"{cfg.learner_scale.value}")
    start = time.perf_counter()
    teacher.freeze(True)
    before = params_digest(teacher)
    learner = Detector(DetectorSpec(cfg.learner_scale, seed=cfg.seed))
    projector = Projector.between(learner, teacher, seed=cfg.seed)
    metrics = _fit(learner, data, cfg, teacher=teacher, projector=projector, **kw)
    after = params_digest(teacher)
    if before != after:
        raise RuntimeError("frozen teacher parameters changed during distillation")
    return StageResult(learner, metrics, projector, (before, after), time.perf_counter() - start)


# ----------------------------------------------------------------------------
# progressive pipeline


@dataclass(frozen=True)
class PipelineConfig:
    """Three stages: senior from scratch, junior from senior, student from junior.

    With ``direct=True`` the junior stage is skipped and the student learns
    from the senior.
    """

    senior: StageConfig = StageConfig(Scale.SENIOR)
    junior: StageConfig = StageConfig(Scale.JUNIOR, batch_size=16)
    student: StageConfig = StageConfig(Scale.TINY)
    direct: bool = False


def progressive_pipeline(data: Dataset, cfg: PipelineConfig, out_dir: str | Path) -> dict:
    """Run the staged pipeline, writing checkpoints, metrics and a manifest.

    Returns a dict with ``senior_ckpt``, ``junior_ckpt`` (absent when direct),
    ``student_ckpt``, ``logs`` and ``manifest`` paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = [("senior", cfg.senior, None)]
    if not cfg.direct:
        stages.append(("junior", cfg.junior, "senior"))
    stages.append(("student", cfg.student, "senior" if cfg.direct else "junior"))
    trained: dict[str, Detector] = {}
    result: dict = {"logs": {}}
    records = []
    for idx, (name, scfg, teacher_name) in enumerate(stages):
        try:
            if teacher_name is None:
                res = train_scratch(scfg.learner_scale, data, scfg)
            else:
                res = distill_stage(replace(scfg, teacher_ckpt=str(out / f"{teacher_name}.ckpt")), data,
                                    teacher=trained[teacher_name])
        except Exception as exc:
            raise StageError(f"{idx}:{name}", exc) from exc
        trained[name] = res.model
        ckpt = out / f"{name}.ckpt"
        save_detector(ckpt, res.model, res.projector)
        metrics_path = out / f"metrics_stage{idx}_{name}.csv"
        res.log.save(metrics_path)
        result[f"{name}_ckpt"] = str(ckpt)
        result["logs"][name] = str(metrics_path)
        records.append({"stage": idx, "name": name, "teacher": teacher_name or "-",
                        "config": _flat_config(scfg), "checkpoint": ckpt.name,
                        "checkpoint_sha256": hashlib.sha256(ckpt.read_bytes()).hexdigest(),
                        "metrics": metrics_path.name, "final_ap50": res.log.final.ap50,
                        "final_map": res.log.final.map, "seconds": round(res.seconds, 2)})
    manifest = out / "manifest.txt"
    manifest.write_text(format_manifest(records, data, cfg.direct))
    result["manifest"] = str(manifest)
    return result


def _flat_config(cfg: StageConfig) -> str:
    d = asdict(cfg)
    loss = d.pop("loss")
    d.pop("teacher_ckpt")
    d["learner_scale"] = cfg.learner_scale.value
    d.update({"loss": cfg.loss.kind.value, "layers": "".join("1" if v else "0" for v in cfg.loss.layers),
              "lambda_kd": loss["lambda_kd"], "lambda_amp": loss["lambda_amp"],
              "normalize": int(loss["normalize"])})
    return " ".join(f"{k}={v}" for k, v in d.items())


def format_manifest(records: list[dict], data: Dataset, direct: bool) -> str:
    lines = ["# progkd run manifest", f"code_version={code_digest()}", f"dataset={data.root}",
             f"dataset_checksum={data.checksum}", f"mode={'direct' if direct else 'progressive'}",
             f"stages={len(records)}"]
    for rec in records:
        lines.append("")
        lines.append(f"[stage.{rec['stage']}]")
        for k, v in rec.items():
            if k != "stage":
                lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> list[dict]:
    """Stage records of a manifest written by :func:`progressive_pipeline`."""
    stages: list[dict] = []
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("[stage."):
            stages.append({"stage": int(line[7:-1])})
        elif stages and "=" in line:
            k, v = line.split("=", 1)
            stages[-1][k] = v
    return stages


def spectral_loss(layers=(True, True, True), lambda_kd: float = 1.0, lambda_amp: float = 0.0) -> DistillLossConfig:
    return DistillLossConfig(LossKind.SPECTRAL_PHASE, tuple(layers), lambda_kd, lambda_amp)


def mse_loss(layers=(True, True, True), lambda_kd: float = 1.0) -> DistillLossConfig:
    return DistillLossConfig(LossKind.FEATURE_MSE, tuple(layers), lambda_kd)
