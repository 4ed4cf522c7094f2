"""INI run configuration.

A config file has up to four kinds of section::

    [data]
    root = data/          ; optional, otherwise rendered in memory
    n_train = 512
    n_test = 128
    seed = 0

    [loss]                ; defaults shared by every stage
    kind = spectral
    layers = p3,p4,p5
    lambda_kd = 1.0
    lambda_amp = 0.0
    normalize = yes       ; divide features by the teacher's RMS per level

    [stage.0]
    learner_scale = senior
    epochs = 30

    [eval]
    split = test

Stage sections take the :class:`~progkd.distill.StageConfig` fields and may
also override any ``[loss]`` key. Unknown sections and keys are errors.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .distill import ConfigError, PipelineConfig, StageConfig
from .losses import DistillLossConfig, LossKind
from .models import Scale

DATA_KEYS = {"root", "n_train", "n_test", "seed"}
LOSS_KEYS = {"kind", "layers", "lambda_kd", "lambda_amp", "normalize"}
STAGE_KEYS = {"learner_scale", "teacher_ckpt", "epochs", "batch_size", "lr0", "seed", "include_task_loss"}
EVAL_KEYS = {"split", "conf_threshold", "nms_iou"}
LEVEL_NAMES = ("p3", "p4", "p5")


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None
    n_train: int = 512
    n_test: int = 128
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    conf_threshold: float = 0.05
    nms_iou: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    loss: DistillLossConfig = field(default_factory=DistillLossConfig)
    stages: tuple[StageConfig, ...] = ()
    eval: EvalConfig = EvalConfig()

    def pipeline(self, direct: bool = False) -> PipelineConfig:
        """Map stages onto the pipeline: 0 senior, 1 junior, 2 student.

        Two stages mean senior and student (direct). Missing stages keep the
        pipeline defaults.
        """
        base = PipelineConfig(direct=direct)
        if len(self.stages) == 2:
            return PipelineConfig(senior=self.stages[0], junior=base.junior, student=self.stages[1], direct=True)
        if len(self.stages) > 3:
            raise ConfigError(f"a pipeline has at most 3 stages, config defines {len(self.stages)}")
        slots = [base.senior, base.junior, base.student]
        slots[:len(self.stages)] = self.stages
        return PipelineConfig(*slots, direct=direct)


def parse_layers(text: str) -> tuple[bool, bool, bool]:
    """``"p3,p5"`` -> ``(True, False, True)``. ``"all"`` selects every level."""
    text = text.strip().lower()
    if text == "all":
        return (True, True, True)
    names = [t.strip() for t in text.replace("+", ",").split(",") if t.strip()]
    bad = [n for n in names if n not in LEVEL_NAMES]
    if bad or not names:
        raise ConfigError(f"layers must be a non-empty subset of p3,p4,p5, got {text!r}")
    return tuple(n in names for n in LEVEL_NAMES)


def format_layers(layers) -> str:
    return ",".join(n for n, on in zip(LEVEL_NAMES, layers) if on)


def parse_loss_kind(text: str) -> LossKind:
    try:
        return LossKind(text.strip().lower())
    except ValueError:
        raise ConfigError(f"unknown loss {text!r}; choose from {[k.value for k in LossKind]}") from None


def _bool(text: str, where: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{where}: expected a boolean, got {text!r}")


def _num(kind, text: str, where: str):
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{where}: expected {kind.__name__}, got {text!r}") from None


def _check_keys(section: configparser.SectionProxy, allowed: set[str]) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"[{section.name}]: unknown key(s) {', '.join(unknown)}")


def _loss_overrides(section: configparser.SectionProxy, base: DistillLossConfig) -> DistillLossConfig:
    where = f"[{section.name}]"
    kw = {}
    if "kind" in section:
        kw["kind"] = parse_loss_kind(section["kind"])
    if "layers" in section:
        kw["layers"] = parse_layers(section["layers"])
    for key in ("lambda_kd", "lambda_amp"):
        if key in section:
            kw[key] = _num(float, section[key], f"{where} {key}")
    if "normalize" in section:
        kw["normalize"] = _bool(section["normalize"], f"{where} normalize")
    try:
        return replace(base, **kw)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _stage(section: configparser.SectionProxy, loss: DistillLossConfig) -> StageConfig:
    where = f"[{section.name}]"
    kw: dict = {"loss": _loss_overrides(section, loss)}
    if "learner_scale" in section:
        try:
            kw["learner_scale"] = Scale(section["learner_scale"].strip().lower())
        except ValueError:
            raise ConfigError(f"{where}: unknown scale {section['learner_scale']!r}") from None
    if "teacher_ckpt" in section:
        kw["teacher_ckpt"] = section["teacher_ckpt"].strip() or None
    for key, kind in (("epochs", int), ("batch_size", int), ("seed", int), ("lr0", float)):
        if key in section:
            kw[key] = _num(kind, section[key], f"{where} {key}")
    if "include_task_loss" in section:
        kw["include_task_loss"] = _bool(section["include_task_loss"], f"{where} include_task_loss")
    return StageConfig(**kw)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse INI text into a :class:`RunConfig`.

    Raises:
        ConfigError: Syntax errors, unknown sections or keys, bad values.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None

    stage_ids = []
    for name in cp.sections():
        if name.startswith("stage."):
            idx = name[len("stage."):]
            if not idx.isdigit():
                raise ConfigError(f"{source}: stage section needs an integer index, got [{name}]")
            stage_ids.append(int(idx))
        elif name not in ("data", "loss", "eval"):
            raise ConfigError(f"{source}: unknown section [{name}]")
    if sorted(stage_ids) != list(range(len(stage_ids))):
        raise ConfigError(f"{source}: stage sections must be numbered 0..N-1, got {sorted(stage_ids)}")

    data = DataConfig()
    if cp.has_section("data"):
        sec = cp["data"]
        _check_keys(sec, DATA_KEYS)
        data = DataConfig(sec.get("root") or None,
                          _num(int, sec.get("n_train", "512"), "[data] n_train"),
                          _num(int, sec.get("n_test", "128"), "[data] n_test"),
                          _num(int, sec.get("seed", "0"), "[data] seed"))

    loss = DistillLossConfig()
    if cp.has_section("loss"):
        _check_keys(cp["loss"], LOSS_KEYS)
        loss = _loss_overrides(cp["loss"], loss)

    stages = []
    for idx in range(len(stage_ids)):
        sec = cp[f"stage.{idx}"]
        _check_keys(sec, STAGE_KEYS | LOSS_KEYS)
        stages.append(_stage(sec, loss))

    ev = EvalConfig()
    if cp.has_section("eval"):
        sec = cp["eval"]
        _check_keys(sec, EVAL_KEYS)
        split = sec.get("split", "test").strip()
        if split not in ("train", "test"):
            raise ConfigError(f"[eval] split must be train or test, got {split!r}")
        ev = EvalConfig(split, _num(float, sec.get("conf_threshold", "0.05"), "[eval] conf_threshold"),
                        _num(float, sec.get("nms_iou", "0.5"), "[eval] nms_iou"))
    return RunConfig(data, loss, tuple(stages), ev)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


__all__ = ["DataConfig", "EvalConfig", "RunConfig", "format_layers", "load_config",
           "parse_config", "parse_layers", "parse_loss_kind"]
