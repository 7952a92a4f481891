"""Experiment configuration files.

One experiment per INI file, one section per module::

    [experiment]
    name = ln-desk
    repeats = 3
    output_dir = results

    [shape]
    preset = desk-base

    [method]
    method = ln

    [train]
    max_epochs = 30
    lr_priority = 1e-2, 1e-3, 2e-4

    [task]
    kind = seq_classify
    shift = token
    shift_strength = 0.5

    [pretrain]
    epochs = 24

Unknown keys are rejected so that a typo never silently falls back to a
default.  A sweep file has a single ``[sweep]`` section whose ``experiments``
key lists experiment files (relative to the sweep file), one per line.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .accounting import PRESETS, resolve_shape
from .errors import ConfigError
from .peft import PeftMethod
from .tasks import SyntheticTask, standard_transfer_task
from .train import PretrainConfig, TrainConfig, default_lr_priority
from .transformer import ENCODER, ModelShape

SECTIONS = ("experiment", "shape", "method", "train", "task", "pretrain")
_METHOD_KEYS = {
    "method", "add_ln", "ln_scope", "prefix_len", "bottleneck", "adapter_scale",
    "exclude_ln_biases", "ablation.term", "ablation.module", "ablation.layers",
}


class ValidationError(ConfigError):
    """A config file failed validation; ``path`` is the ``section.key`` at fault."""


@dataclass(frozen=True)
class PretrainSpec:
    """How the shared base checkpoint is produced."""

    config: PretrainConfig = PretrainConfig()
    corpus_size: int = 4000
    grammar_seed: int = 0

    def task(self, shape: ModelShape) -> SyntheticTask:
        kind = "mlm_pretrain" if shape.arch == ENCODER else "clm_pretrain"
        return SyntheticTask(kind, vocab=shape.vocab, grammar_seed=self.grammar_seed,
                             train=self.corpus_size, val=0, test=0, seq_len=shape.max_len // 2)

    def to_dict(self) -> dict:
        return {"corpus_size": self.corpus_size, "grammar_seed": self.grammar_seed,
                **dataclasses.asdict(self.config)}


@dataclass(frozen=True)
class ExperimentConfig:
    shape: ModelShape
    method: PeftMethod
    train: TrainConfig
    task: SyntheticTask
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    name: str = "experiment"
    repeats: int = 3
    seed: int = 0
    output_dir: Path = Path("results")
    shape_name: str = "custom"

    def __post_init__(self):
        if self.repeats < 1:
            raise ValidationError("must be >= 1", "experiment.repeats")
        if self.task.is_pretraining:
            raise ValidationError("an experiment needs a downstream task", "task.kind")
        if self.task.arch != self.shape.arch:
            raise ValidationError(
                f"task {self.task.kind} needs a {self.task.arch} shape, got {self.shape.arch}", "task.kind")
        if self.task.vocab != self.shape.vocab:
            raise ValidationError(
                f"task vocab {self.task.vocab} != shape vocab {self.shape.vocab}", "task.vocab")
        if self.task.seq_len > self.shape.max_len:
            raise ValidationError("longer than shape.max_len", "task.seq_len")

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.repeats)]

    def identity(self) -> dict:
        """Everything that determines the results; the fingerprint hashes this."""
        train = dataclasses.asdict(self.train)
        train.pop("seed")
        return {
            "shape": self.shape.to_dict(),
            "method": self.method.to_flat(),
            "train": train,
            "task": self.task.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "seeds": self.seeds,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)


# -- parsing ---------------------------------------------------------------------


def _typed(section: str, raw: dict[str, str], spec: dict[str, type]) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in spec:
            raise ValidationError(f"unknown key (expected one of {sorted(spec)})", f"{section}.{key}")
        kind = spec[key]
        value = value.strip()
        try:
            if kind is bool:
                low = value.lower()
                if low not in ("true", "false", "yes", "no", "1", "0"):
                    raise ValueError(value)
                out[key] = low in ("true", "yes", "1")
            elif kind is tuple:
                out[key] = tuple(float(v) for v in value.replace(",", " ").split())
            elif kind is int:
                out[key] = None if value.lower() == "none" else int(value)
            elif kind is float:
                out[key] = float(value)
            else:
                out[key] = value
        except ValueError:
            raise ValidationError(f"expected {kind.__name__}, got {value!r}", f"{section}.{key}") from None
    return out


def _field_types(cls) -> dict[str, type]:
    hints = {}
    for f in dataclasses.fields(cls):
        t = str(f.type)
        if "tuple" in t:
            hints[f.name] = tuple
        elif t.startswith("int"):
            hints[f.name] = int
        elif t.startswith("float"):
            hints[f.name] = float
        elif t.startswith("bool"):
            hints[f.name] = bool
        else:
            hints[f.name] = str
    return hints


def _build(cls, section: str, kwargs: dict):
    try:
        return cls(**kwargs)
    except ValidationError:
        raise
    except ConfigError as exc:
        path = exc.path if exc.path and exc.path.startswith(section + ".") else f"{section}.{exc.path or '?'}"
        message = str(exc).split(": ", 1)[-1] if exc.path else str(exc)
        raise ValidationError(message, path) from None


def parse_shape(raw: dict[str, str]) -> tuple[ModelShape, str]:
    raw = dict(raw)
    preset = raw.pop("preset", None)
    fields = _typed("shape", raw, _field_types(ModelShape))
    if preset is None:
        if not fields:
            raise ValidationError("give a preset or the explicit shape fields", "shape.preset")
        return _build(ModelShape, "shape", fields), "custom"
    preset = preset.strip()
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}", "shape.preset")
    base = resolve_shape(preset)
    if not fields:
        return base, preset
    return _build(ModelShape, "shape", {**base.to_dict(), **fields}), "custom"


def parse_method(raw: dict[str, str]) -> PeftMethod:
    for key in raw:
        if key not in _METHOD_KEYS:
            raise ValidationError(f"unknown key (expected one of {sorted(_METHOD_KEYS)})", f"method.{key}")
    return _build(PeftMethod.from_flat, "method", {"flat": dict(raw)})


def parse_train(raw: dict[str, str], method: PeftMethod) -> TrainConfig:
    kwargs = _typed("train", raw, _field_types(TrainConfig))
    kwargs.setdefault("lr_priority", default_lr_priority(method))
    return _build(TrainConfig, "train", kwargs)


def parse_task(raw: dict[str, str], shape: ModelShape) -> SyntheticTask:
    """Missing keys of a ``seq_classify`` task fall back to the standard transfer task."""
    kwargs = _typed("task", raw, _field_types(SyntheticTask))
    kwargs.setdefault("kind", "seq_classify" if shape.arch == ENCODER else "kv_to_text")
    kwargs.setdefault("vocab", shape.vocab)
    if kwargs["kind"] == "seq_classify":
        kwargs = {**standard_transfer_task(shape.vocab).to_dict(), **kwargs}
    return _build(SyntheticTask, "task", kwargs)


def parse_pretrain(raw: dict[str, str]) -> PretrainSpec:
    spec = {**_field_types(PretrainConfig), "corpus_size": int, "grammar_seed": int}
    kwargs = _typed("pretrain", raw, spec)
    outer = {k: kwargs.pop(k) for k in ("corpus_size", "grammar_seed") if k in kwargs}
    cfg = _build(PretrainConfig, "pretrain", {**dataclasses.asdict(PretrainSpec().config), **kwargs})
    return PretrainSpec(cfg, **outer)


def parse_experiment(text: str, origin: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ValidationError(str(exc).splitlines()[0], "file") from None
    for section in cp.sections():
        if section not in SECTIONS:
            raise ValidationError(f"unknown section (expected one of {list(SECTIONS)})", section)
    if not cp.has_section("method"):
        raise ValidationError("missing section", "method")
    sec = {s: dict(cp[s]) if cp.has_section(s) else {} for s in SECTIONS}
    shape, shape_name = parse_shape(sec["shape"] or {"preset": "desk-base"})
    method = parse_method(sec["method"])
    exp = _typed("experiment", sec["experiment"],
                 {"name": str, "repeats": int, "seed": int, "output_dir": str})
    return _build(ExperimentConfig, "experiment", dict(
        shape=shape,
        shape_name=shape_name,
        method=method,
        train=parse_train(sec["train"], method),
        task=parse_task(sec["task"], shape),
        pretrain=parse_pretrain(sec["pretrain"]),
        name=exp.get("name", Path(origin).stem if origin != "<string>" else "experiment"),
        repeats=exp.get("repeats", 3),
        seed=exp.get("seed", 0),
        output_dir=Path(exp.get("output_dir", "results")),
    ))


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}", "file") from None
    return parse_experiment(text, origin=str(path))


def load_sweep(path) -> list[Path]:
    """Experiment files listed by a sweep file, resolved against its directory."""
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except (OSError, configparser.Error) as exc:
        raise ValidationError(str(exc).splitlines()[0], "sweep") from None
    if not cp.has_option("sweep", "experiments"):
        raise ValidationError("missing key", "sweep.experiments")
    entries = [line.strip() for line in cp["sweep"]["experiments"].splitlines() if line.strip()]
    if not entries:
        raise ValidationError("lists no experiment files", "sweep.experiments")
    return [(path.parent / e).resolve() for e in entries]


def render_experiment(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_experiment` (up to comments and key order)."""
    lines = [
        "[experiment]",
        f"name = {cfg.name}",
        f"repeats = {cfg.repeats}",
        f"seed = {cfg.seed}",
        f"output_dir = {cfg.output_dir}",
        "",
        "[shape]",
    ]
    if cfg.shape_name != "custom":
        lines.append(f"preset = {cfg.shape_name}")
    else:
        lines += [f"{k} = {v}" for k, v in cfg.shape.to_dict().items()]
    lines += ["", "[method]"]
    lines += [f"{k} = {v}" for k, v in cfg.method.to_flat().items() if v != ""]
    lines += ["", "[train]"]
    for k, v in dataclasses.asdict(cfg.train).items():
        if k == "seed" or v is None:
            continue
        lines.append(f"{k} = {', '.join(repr(x) for x in v) if isinstance(v, tuple) else v}")
    lines += ["", "[task]"]
    lines += [f"{k} = {v}" for k, v in cfg.task.to_dict().items()]
    lines += ["", "[pretrain]"]
    lines += [f"{k} = {v}" for k, v in cfg.pretrain.to_dict().items()]
    return "\n".join(lines) + "\n"
