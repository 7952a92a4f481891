"""Training loop, Adam, early stopping, learning-rate priority search, timing."""

from __future__ import annotations

import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ComparabilityError, ConfigError, NumericError, SearchError
from .peft import ParameterGroup, PeftMethod, apply_method
from .tasks import CLS, MASK, N_SPECIAL, Dataset, Split, SyntheticTask, evaluate, generate_task
from .transformer import DECODER, ENCODER, ModelShape, TransformerModel, forward

log = logging.getLogger("lntune.train")

LN_LR_PRIORITY = (1e-2, 1e-3, 2e-4)
DEFAULT_LR_PRIORITY = (1e-3, 2e-4)
# a validation loss counts as "no decrease" unless it beats the best by more than this
NON_DECREASE_TOL = 1e-12


def default_lr_priority(method: PeftMethod) -> tuple[float, ...]:
    return LN_LR_PRIORITY if method.kind == "ln" else DEFAULT_LR_PRIORITY


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    early_stop_patience: int = 10
    batch_size: int = 32
    lr_priority: tuple[float, ...] = DEFAULT_LR_PRIORITY
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int | None = None
    eval_batch_size: int = 256

    def __post_init__(self):
        if not self.lr_priority:
            raise ConfigError("must be nonempty", "train.lr_priority")
        if any(not lr > 0 for lr in self.lr_priority):
            raise ConfigError("learning rates must be positive", "train.lr_priority")
        if self.early_stop_patience < 1:
            raise ConfigError("must be >= 1", "train.early_stop_patience")
        if self.max_epochs < 1:
            raise ConfigError("must be >= 1", "train.max_epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "train.batch_size")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("must be >= 1", "train.max_steps")


class Adam:
    """Adam without weight decay; moment buffers exist only for ``params``."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class EarlyStopper:
    """Stops after ``patience`` consecutive epochs without a strict loss decrease."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; True when training should stop."""
        if val_loss < self.best - NON_DECREASE_TOL:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class DurationStats:
    median: float = 0.0
    mean: float = 0.0
    stdev: float = 0.0
    n: int = 0

    @classmethod
    def of(cls, values: Sequence[float]) -> "DurationStats":
        values = list(values)
        if not values:
            return cls()
        return cls(
            median=statistics.median(values),
            mean=statistics.fmean(values),
            stdev=statistics.pstdev(values),
            n=len(values),
        )


@dataclass
class RunTimings:
    train_time_per_step: DurationStats = field(default_factory=DurationStats)
    infer_time_per_batch: DurationStats = field(default_factory=DurationStats)
    relative_to_full: dict[str, float] | None = None


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float
    elapsed: float

    def line(self) -> str:
        return (
            f"epoch={self.epoch} train_loss={self.train_loss:.6f} val_loss={self.val_loss:.6f} "
            f"val_metric={self.val_metric:.6f} elapsed={self.elapsed:.3f}"
        )


@dataclass
class TrainResult:
    lr: float
    best_epoch: int = 0
    stop_epoch: int = 0
    steps: int = 0
    best_val_metric: float = float("nan")
    best_val_loss: float = float("nan")
    final_val_metric: float = float("nan")
    history: list[EpochLog] = field(default_factory=list)
    timings: RunTimings = field(default_factory=RunTimings)
    failed: bool = False
    error: str | None = None
    comparability: tuple = ()


# -- losses ----------------------------------------------------------------------


def task_loss(model: TransformerModel, dataset: Dataset, batch: Split) -> Tensor:
    kind = dataset.kind
    if kind == "seq_classify":
        return ad.cross_entropy(forward(model, batch.inputs), batch.labels)
    if kind == "kv_to_text":
        seq = np.concatenate([batch.inputs, batch.targets], axis=1)
        prompt_len = batch.inputs.shape[1]
        logits = forward(model, seq[:, :-1])
        mask = np.zeros(seq[:, 1:].shape)
        mask[:, prompt_len - 1 :] = 1.0
        return ad.cross_entropy(logits, seq[:, 1:], mask)
    raise ConfigError(f"no training loss for task kind {kind}")


def validation_loss(model, dataset: Dataset, split: str = "val", batch_size: int = 256) -> float:
    data = dataset[split]
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(data), batch_size):
            part = data.subset(slice(lo, lo + batch_size))
            total += task_loss(model, dataset, part).item() * len(part)
    return total / len(data)


def _check_arch(model: TransformerModel, dataset: Dataset) -> None:
    if model.shape.arch != dataset.arch:
        raise ConfigError(f"task {dataset.kind} needs a {dataset.arch} model, got {model.shape.arch}")


# -- training ---------------------------------------------------------------------


def train(
    model: TransformerModel,
    group: ParameterGroup,
    dataset: Dataset,
    cfg: TrainConfig,
    lr: float | None = None,
) -> TrainResult:
    """Adam on ``group``'s trainable parameters with early stopping on validation loss.

    At the end the trainable parameters are restored to the epoch with the
    best validation metric (ties keep the earlier epoch).
    """
    _check_arch(model, dataset)
    params = group.trainable(model)
    if not params:
        raise ConfigError("the trainable set is empty")
    lr = cfg.lr_priority[0] if lr is None else lr
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    stopper = EarlyStopper(cfg.early_stop_patience)
    train_split = dataset["train"]
    n = len(train_split)
    result = TrainResult(
        lr=lr,
        comparability=(
            tuple(sorted(model.shape.to_dict().items())),
            cfg.batch_size,
            dataset.task.fingerprint(),
        ),
    )
    best_state: dict[str, np.ndarray] | None = None
    epoch_step_times: list[list[float]] = []
    infer_times: list[float] = []
    start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        epoch_times = []
        for lo in range(0, n, cfg.batch_size):
            batch = train_split.subset(order[lo : lo + cfg.batch_size])
            t0 = time.perf_counter()
            opt.zero_grad()
            loss = task_loss(model, dataset, batch)
            value = loss.item()
            if not math.isfinite(value):
                result.failed = True
                result.error = f"non-finite training loss at epoch {epoch}, step {result.steps + 1}"
                break
            ad.backward(loss)
            opt.step(lr)
            epoch_times.append(time.perf_counter() - t0)
            losses.append(value)
            result.steps += 1
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break
        if result.failed:
            result.stop_epoch = epoch
            log.warning("run failed: %s", result.error)
            break
        epoch_step_times.append(epoch_times)
        val_loss = validation_loss(model, dataset, batch_size=cfg.eval_batch_size)
        t0 = time.perf_counter()
        metric = evaluate(model, dataset, "val", batch_size=cfg.eval_batch_size)[0].value
        infer_times.append(time.perf_counter() - t0)
        entry = EpochLog(epoch, float(np.mean(losses)), val_loss, metric, time.perf_counter() - start)
        result.history.append(entry)
        log.info(entry.line())
        if not math.isfinite(val_loss):
            result.failed = True
            result.error = f"non-finite validation loss at epoch {epoch}"
            result.stop_epoch = epoch
            break
        if best_state is None or metric > result.best_val_metric:
            result.best_val_metric = metric
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_state = {k: p.data.copy() for k, p in params.items()}
        result.stop_epoch = epoch
        if stopper.update(val_loss):
            break
        if cfg.max_steps is not None and result.steps >= cfg.max_steps:
            break
    if result.history:
        result.final_val_metric = result.history[-1].val_metric
    if best_state is not None and not result.failed:
        for k, p in params.items():
            p.data[...] = best_state[k]
    # steady state: drop the warm-up epoch, or the first step of a single epoch
    if len(epoch_step_times) > 1:
        step_times = [t for ep in epoch_step_times[1:] for t in ep]
    else:
        step_times = [t for ep in epoch_step_times for t in ep][1:]
    result.timings = RunTimings(DurationStats.of(step_times), DurationStats.of(infer_times))
    return result


def lr_search(
    model_factory: Callable[[], TransformerModel],
    group_factory: Callable[[TransformerModel], ParameterGroup],
    dataset: Dataset,
    cfg: TrainConfig,
    train_fn: Callable = train,
):
    """Train once per candidate learning rate (fresh model each time).

    Returns ``(best_lr, result, model)``; the best validation metric wins and
    ties go to the earlier candidate.  Failed runs are skipped.
    """
    best = None
    failures = []
    for lr in cfg.lr_priority:
        model = model_factory()
        group = group_factory(model)
        res = train_fn(model, group, dataset, cfg, lr=lr)
        if res.failed:
            failures.append(f"lr={lr}: {res.error}")
            continue
        if best is None or res.best_val_metric > best[1].best_val_metric:
            best = (lr, res, model)
    if best is None:
        raise SearchError("every learning-rate candidate failed: " + "; ".join(failures))
    return best


def measure_relative_time(results: dict[str, TrainResult], baseline: TrainResult) -> dict[str, dict]:
    """Per-method median step/batch time as a percentage of full tuning."""
    base_train = baseline.timings.train_time_per_step.median
    base_infer = baseline.timings.infer_time_per_batch.median
    table = {}
    for name, res in results.items():
        if res.comparability != baseline.comparability:
            raise ComparabilityError(f"{name}: run is not comparable with the full-tuning baseline")
        if res is baseline:
            table[name] = {"train": 100.0, "infer": 100.0}
            continue
        tr = res.timings.train_time_per_step.median
        inf = res.timings.infer_time_per_batch.median
        table[name] = {
            "train": 100.0 * tr / base_train if base_train else float("nan"),
            "infer": 100.0 * inf / base_infer if base_infer else float("nan"),
        }
    return table


# -- pretraining -------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 24
    batch_size: int = 32
    lr: float = 1e-3
    mask_prob: float = 0.15
    seed: int = 0


def pretrain_loss(model: TransformerModel, batch: np.ndarray, rng, mask_prob: float) -> Tensor:
    if model.shape.arch == DECODER:
        logits = forward(model, batch[:, :-1])
        return ad.cross_entropy(logits, batch[:, 1:])
    content = batch >= N_SPECIAL
    chosen = (rng.random(batch.shape) < mask_prob) & content
    chosen[~chosen.any(axis=1), 1] = True
    inputs = np.where(chosen, MASK, batch)
    inputs[:, 0] = CLS
    logits = forward(model, inputs, mlm=True)
    return ad.cross_entropy(logits, batch, chosen.astype(float))


def pretrain(shape: ModelShape, task: SyntheticTask, cfg: PretrainConfig = PretrainConfig()):
    """Fresh model trained with masked-LM (encoder) or causal-LM (decoder)."""
    want = "mlm_pretrain" if shape.arch == ENCODER else "clm_pretrain"
    if task.kind != want:
        raise ConfigError(f"a {shape.arch} model pretrains on {want}, got {task.kind}", "task.kind")
    if task.vocab != shape.vocab:
        raise ConfigError(f"task vocab {task.vocab} != model vocab {shape.vocab}", "task.vocab")
    model = TransformerModel.initialize(shape, seed=cfg.seed)
    params = model.params
    for t in params.values():
        t.requires_grad = True
    opt = Adam(params)
    data = generate_task(task)["train"].inputs
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        losses = []
        for lo in range(0, len(data), cfg.batch_size):
            opt.zero_grad()
            loss = pretrain_loss(model, data[order[lo : lo + cfg.batch_size]], rng, cfg.mask_prob)
            if not math.isfinite(loss.item()):
                raise NumericError(f"pretraining diverged at epoch {epoch}")
            ad.backward(loss)
            opt.step(cfg.lr)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.info("pretrain epoch=%d loss=%.6f", epoch, history[-1])
    for t in params.values():
        t.requires_grad = False
        t.grad = None
    return model, history


def attach(model: TransformerModel, method: PeftMethod, seed: int) -> ParameterGroup:
    """Give ``model`` a fresh task head (encoders) and apply ``method`` in place."""
    if model.shape.arch == ENCODER:
        model.reset_head(seed=seed)
    return apply_method(model, method, seed=seed)


def prepare(base: TransformerModel, method: PeftMethod, dataset: Dataset, seed: int):
    """Fresh copy of ``base`` with a new task head and ``method`` applied."""
    model = base.copy()
    return model, attach(model, method, seed)
