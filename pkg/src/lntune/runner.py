"""Experiment runner and the on-disk results store.

Layout of an output directory::

    bases/<key>.npz              pretrained base checkpoints, shared by experiments
    runs/<fingerprint>.json      one RunResult per experiment fingerprint
    runs/<fingerprint>.timings.json   wall-clock measurements for that run

Run files contain only quantities that are a pure function of the
configuration, so re-running an experiment reproduces them byte for byte.
Wall-clock timings vary from run to run and therefore live in the sidecar.
All writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import statistics
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .accounting import count_params
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .errors import ConfigError, LnTuneError
from .peft import collapse_prefix
from .tasks import evaluate, generate_task
from .train import attach, lr_search, prepare, pretrain, train
from .transformer import TransformerModel

log = logging.getLogger("lntune.runner")

RESULT_FORMAT = 1


class CacheError(LnTuneError):
    """A cached artifact exists but cannot be read; re-run with ``force``."""


def write_atomic(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


@dataclass
class SeedRun:
    seed: int
    lr: float
    test_metric: float
    best_val_metric: float
    best_epoch: int
    stop_epoch: int
    steps: int


@dataclass
class RunResult:
    fingerprint: str
    name: str
    method: str
    method_config: dict
    shape_name: str
    shape: dict
    task: dict
    metric: str
    best_lr: float
    per_seed: list[SeedRun]
    mean_metric: float
    stop_epochs: list[int]
    accounting: dict
    pretrain: dict
    format: int = RESULT_FORMAT

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.per_seed]

    def to_json(self) -> str:
        return dump_json(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "RunResult":
        d = json.loads(text)
        if d.get("format") != RESULT_FORMAT:
            raise ValueError(f"unsupported result format {d.get('format')}")
        d["per_seed"] = [SeedRun(**r) for r in d["per_seed"]]
        return cls(**d)


@dataclass
class RunTimingRecord:
    """Sidecar contents: per-seed median step/batch times plus the comparability key."""

    fingerprint: str
    method: str
    comparability: list
    train_step_seconds: list[float] = field(default_factory=list)
    infer_batch_seconds: list[float] = field(default_factory=list)

    @property
    def train_median(self) -> float:
        return statistics.median(self.train_step_seconds)

    @property
    def infer_median(self) -> float:
        return statistics.median(self.infer_batch_seconds)


# -- results store -------------------------------------------------------------------


class ResultsStore:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    def run_path(self, fingerprint: str) -> Path:
        return self.runs_dir / f"{fingerprint}.json"

    def timing_path(self, fingerprint: str) -> Path:
        return self.runs_dir / f"{fingerprint}.timings.json"

    def base_path(self, key: str) -> Path:
        return self.root / "bases" / f"{key}.npz"

    def load(self, fingerprint: str) -> RunResult | None:
        path = self.run_path(fingerprint)
        if not path.exists():
            return None
        try:
            return RunResult.from_json(path.read_text(encoding="utf-8"))
        except (ValueError, KeyError, TypeError) as exc:
            raise CacheError(f"{path} is corrupt ({exc}); re-run with --force to overwrite") from None

    def save(self, result: RunResult, timings: RunTimingRecord | None = None) -> Path:
        path = write_atomic(self.run_path(result.fingerprint), result.to_json())
        if timings is not None:
            write_atomic(self.timing_path(result.fingerprint), dump_json(dataclasses.asdict(timings)))
        return path

    def load_timings(self, fingerprint: str) -> RunTimingRecord | None:
        path = self.timing_path(fingerprint)
        if not path.exists():
            return None
        try:
            return RunTimingRecord(**json.loads(path.read_text(encoding="utf-8")))
        except (ValueError, TypeError) as exc:
            raise CacheError(f"{path} is corrupt ({exc})") from None

    def all_results(self) -> list[RunResult]:
        if not self.runs_dir.is_dir():
            return []
        out = []
        for path in sorted(self.runs_dir.glob("*.json")):
            if path.name.endswith(".timings.json"):
                continue
            out.append(self.load(path.stem))
        return out


# -- base checkpoints ----------------------------------------------------------------


def base_key(cfg: ExperimentConfig) -> str:
    blob = json.dumps({"shape": cfg.shape.to_dict(), "pretrain": cfg.pretrain.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def ensure_base(cfg: ExperimentConfig, store: ResultsStore, force: bool = False) -> TransformerModel:
    """Load the cached pretrained base for ``cfg`` or pretrain and cache it."""
    path = store.base_path(base_key(cfg))
    if path.exists() and not force:
        try:
            model = load_checkpoint(path)
        except ConfigError as exc:
            raise CacheError(f"{exc}; re-run with --force to rebuild it") from None
        if model.shape != cfg.shape:
            raise CacheError(f"{path} holds a different shape; re-run with --force to rebuild it")
        return model
    log.info("pretraining base %s", path.name)
    model, history = pretrain(cfg.shape, cfg.pretrain.task(cfg.shape), cfg.pretrain.config)
    save_checkpoint(model, path)
    write_atomic(path.with_suffix(".history.json"), dump_json({"loss": history}))
    return model


# -- experiments ---------------------------------------------------------------------


def _accounting(cfg: ExperimentConfig) -> dict:
    c = count_params(cfg.shape, cfg.method)
    return {
        "trainable": c.trainable,
        "trainable_during_training": c.trainable_during_training,
        "head": c.head,
        "total": c.total,
        "no_embed": c.no_embed,
        "ratio_total": c.ratio_total,
        "ratio_no_embed": c.ratio_no_embed,
    }


def run_experiment(
    cfg: ExperimentConfig,
    store: ResultsStore | None = None,
    force: bool = False,
    base: TransformerModel | None = None,
) -> RunResult:
    """Pretrain-or-load, search the learning rate on the first seed, repeat, evaluate, persist.

    An existing result with the same fingerprint is returned unchanged
    unless ``force`` is set.
    """
    store = store or ResultsStore(cfg.output_dir)
    fp = cfg.fingerprint()
    if not force:
        cached = store.load(fp)
        if cached is not None:
            log.info("cached result %s", fp)
            return cached
    base = base if base is not None else ensure_base(cfg, store)
    dataset = generate_task(cfg.task)
    runs: list[SeedRun] = []
    train_times, infer_times = [], []
    comparability: list = []
    best_lr = None
    for seed in cfg.seeds:
        tcfg = dataclasses.replace(cfg.train, seed=seed)
        if best_lr is None:
            best_lr, res, model = lr_search(
                lambda: base.copy(),
                lambda m: attach(m, cfg.method, seed),
                dataset,
                tcfg,
            )
        else:
            model, group = prepare(base, cfg.method, dataset, seed)
            res = train(model, group, dataset, tcfg, lr=best_lr)
            if res.failed:
                raise LnTuneError(f"seed {seed} failed at lr={best_lr}: {res.error}")
        if model.peft is not None and model.peft.prefix is not None:
            collapse_prefix(model.peft.prefix, drop_mlp=True)
        metric = evaluate(model, dataset, "test", batch_size=cfg.train.eval_batch_size)[0]
        runs.append(SeedRun(seed, best_lr, metric.value, res.best_val_metric,
                            res.best_epoch, res.stop_epoch, res.steps))
        train_times.append(res.timings.train_time_per_step.median)
        infer_times.append(res.timings.infer_time_per_batch.median)
        comparability = json.loads(json.dumps(res.comparability))
        log.info("%s seed=%d lr=%g test_%s=%.4f", cfg.method.name, seed, best_lr, metric.name, metric.value)
    result = RunResult(
        fingerprint=fp,
        name=cfg.name,
        method=cfg.method.name,
        method_config=cfg.method.to_flat(),
        shape_name=cfg.shape_name,
        shape=cfg.shape.to_dict(),
        task=cfg.task.to_dict(),
        metric="accuracy" if cfg.task.kind == "seq_classify" else "rouge_l",
        best_lr=best_lr,
        per_seed=runs,
        mean_metric=statistics.fmean(r.test_metric for r in runs),
        stop_epochs=[r.stop_epoch for r in runs],
        accounting=_accounting(cfg),
        pretrain=cfg.pretrain.to_dict(),
    )
    timings = RunTimingRecord(fp, cfg.method.name, comparability, train_times, infer_times)
    store.save(result, timings)
    return result

