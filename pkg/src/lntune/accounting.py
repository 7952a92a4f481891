"""Closed-form parameter accounting for every method on any model shape.

Counts never instantiate a model, so they work for BERT/GPT-2 sized shapes.
``tests/test_accounting.py`` checks them against name enumeration on small
instantiated models.

Conventions:

* ``trainable`` is the number of method parameters that persist per task,
  excluding the task head (reported separately as ``head``).  For prefix
  tuning this is the collapsed key/value buffer ``2 * L * l * H``; the
  reparameterization MLP used during training is reported as
  ``trainable_during_training``.  ``full`` counts every parameter.
* ``total`` is every base-model parameter plus the persisted injected ones.
  ``no_embed`` is ``total`` minus the token and position embedding tables.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, SolverError
from .peft import LnAblation, PeftMethod
from .transformer import DECODER, ENCODER, ModelShape

PRESETS: dict[str, ModelShape] = {
    "desk-base": ModelShape(num_layers=4, hidden=64, heads=4, ffn_dim=256, vocab=48, max_len=32),
    "desk-large": ModelShape(num_layers=8, hidden=96, heads=4, ffn_dim=384, vocab=48, max_len=32),
    "bert-base-shape": ModelShape(
        num_layers=12, hidden=768, heads=12, ffn_dim=3072, vocab=30522, max_len=512
    ),
    "bert-large-shape": ModelShape(
        num_layers=24, hidden=1024, heads=16, ffn_dim=4096, vocab=30522, max_len=512
    ),
    "gpt2-medium-shape": ModelShape(
        num_layers=24, hidden=1024, heads=16, ffn_dim=4096, vocab=50257, max_len=1024, arch=DECODER
    ),
}
ACCOUNTING_ONLY = frozenset({"bert-base-shape", "bert-large-shape", "gpt2-medium-shape"})

# alignment settings used for the BERT/GPT-2 budget tables
REFERENCE_SETTINGS = {
    "bert-base-shape": {"prefix_len": 16, "bottleneck": 16, "mam_prefix_len": 8, "mam_bottleneck": 8},
    "bert-large-shape": {"prefix_len": 24, "bottleneck": 24, "mam_prefix_len": 8, "mam_bottleneck": 16},
    "gpt2-medium-shape": {"prefix_len": 16, "bottleneck": 16, "mam_prefix_len": 8, "mam_bottleneck": 8},
}

DENOMINATORS = ("total", "no-embed")


def resolve_shape(shape: ModelShape | str) -> ModelShape:
    if isinstance(shape, ModelShape):
        return shape
    try:
        return PRESETS[shape]
    except KeyError:
        raise ConfigError(f"unknown shape preset {shape!r}", "shape.preset") from None


@dataclass(frozen=True)
class ParamCount:
    method: str
    trainable: int
    trainable_during_training: int
    head: int
    total: int
    no_embed: int
    trainable_embeddings: int = 0

    def ratio(self, denom: str = "total") -> float:
        if denom == "total":
            return self.trainable / self.total
        if denom in ("no-embed", "excluding_embeddings"):
            return (self.trainable - self.trainable_embeddings) / self.no_embed
        raise ConfigError(f"unknown denominator {denom!r}", "denominator")

    @property
    def ratio_total(self) -> float:
        return self.ratio("total")

    @property
    def ratio_no_embed(self) -> float:
        return self.ratio("no-embed")


def embedding_params(s: ModelShape) -> int:
    return s.vocab * s.hidden + s.max_len * s.hidden


def layer_params(s: ModelShape) -> int:
    h, f = s.hidden, s.ffn_dim
    return 4 * (h * h + h) + (h * f + f) + (f * h + h) + 4 * h


def head_params(s: ModelShape) -> int:
    return s.hidden * s.num_classes + s.num_classes if s.arch == ENCODER else 0


def base_params(s: ModelShape) -> int:
    return embedding_params(s) + 2 * s.hidden + s.num_layers * layer_params(s) + head_params(s)


def _ln_vectors(s: ModelShape, m: PeftMethod) -> tuple[int, int]:
    """(number of selected LN vectors, how many of them are bias vectors)."""
    ab = m.ablation or LnAblation()
    ab.check(s.num_layers)
    lo, hi = ab.layers or (1, s.num_layers)
    layers = hi - lo + 1
    modules = 2 if ab.module == "both" else 1
    gains = 0 if ab.term == "bias_only" else 1
    biases = 0 if ab.term == "gain_only" else 1
    n_vec = layers * modules * (gains + biases)
    n_bias = layers * modules * biases
    if m.ln_scope == "blocks_plus_embedding_ln" and ab.module == "both" and ab.layers is None:
        n_vec += gains + biases
        n_bias += biases
    return n_vec, n_bias


def _bitfit_params(s: ModelShape, exclude_ln: bool) -> int:
    h, f = s.hidden, s.ffn_dim
    per_layer = 4 * h + f + h + (0 if exclude_ln else 2 * h)
    return s.num_layers * per_layer + (0 if exclude_ln else h)


def prefix_persisted(s: ModelShape, prefix_len: int) -> int:
    return 2 * s.num_layers * prefix_len * s.hidden


def prefix_training(s: ModelShape, prefix_len: int) -> int:
    h, mid, out = s.hidden, 4 * s.hidden, 2 * s.num_layers * s.hidden
    return prefix_len * h + (h * mid + mid) + (mid * out + out)


def adapter_params(s: ModelShape, bottleneck: int) -> int:
    h = s.hidden
    return s.num_layers * (h * bottleneck + bottleneck + bottleneck * h + h)


def count_params(shape: ModelShape | str, m: PeftMethod) -> ParamCount:
    """Exact trainable counts and both ratio denominators for ``m`` on ``shape``."""
    s = resolve_shape(shape)
    if m.kind == "head" and s.arch != ENCODER:
        raise ConfigError("kind=head needs an encoder-classifier model", "method.method")
    base = base_params(s)
    injected = injected_train = 0
    if m.uses_prefix:
        injected += prefix_persisted(s, m.prefix_len)
        injected_train += prefix_training(s, m.prefix_len)
    if m.uses_adapter:
        injected += adapter_params(s, m.bottleneck)
        injected_train += adapter_params(s, m.bottleneck)
    total = base + injected
    no_embed = total - embedding_params(s)
    head = head_params(s)

    if m.kind == "full":
        return ParamCount(
            m.name, total, base + injected_train, head, total, no_embed, embedding_params(s)
        )
    if m.kind == "ln":
        own = 0
    elif m.kind == "bitfit":
        own = _bitfit_params(s, m.exclude_ln_biases)
    else:
        own = 0  # head / prefix / adapters: everything lives in ``injected``
    ln = overlap = 0
    if m.tunes_ln:
        n_vec, n_bias = _ln_vectors(s, m)
        ln = n_vec * s.hidden
        if m.kind == "bitfit" and not m.exclude_ln_biases:
            overlap = n_bias * s.hidden
    trainable = own + injected + ln - overlap
    during = own + injected_train + ln - overlap
    return ParamCount(m.name, trainable, during, head, total, no_embed)


def reference_methods(preset: str) -> list[PeftMethod]:
    """The budget-table methods with the alignment settings for ``preset``."""
    cfg = REFERENCE_SETTINGS[preset]
    return [
        PeftMethod("full"),
        PeftMethod("scaled_parallel_adapter_ffn", bottleneck=cfg["bottleneck"]),
        PeftMethod("prefix", prefix_len=cfg["prefix_len"]),
        PeftMethod("mam", prefix_len=cfg["mam_prefix_len"], bottleneck=cfg["mam_bottleneck"]),
        PeftMethod("bitfit"),
        PeftMethod("bitfit", exclude_ln_biases=True),
        PeftMethod("ln"),
        PeftMethod("ln", ln_scope="blocks_plus_embedding_ln"),
    ]


_KNOB_METHOD = {
    "prefix_len": lambda k: PeftMethod("prefix", prefix_len=k),
    "bottleneck": lambda k: PeftMethod("scaled_parallel_adapter_ffn", bottleneck=k),
}
MAX_KNOB = 1 << 20


def solve_alignment(
    shape: ModelShape | str, target_ratio: float, knob: str, denom: str = "total"
) -> int:
    """Smallest prefix length / bottleneck whose ratio reaches ``target_ratio``.

    The ratio is strictly increasing in the knob, so a doubling search followed
    by bisection finds the answer.
    """
    if knob not in _KNOB_METHOD:
        raise ConfigError(f"unknown knob {knob!r}; expected one of {sorted(_KNOB_METHOD)}")
    if not target_ratio > 0:
        raise SolverError(f"target ratio must be positive, got {target_ratio}")
    s = resolve_shape(shape)
    make = _KNOB_METHOD[knob]

    def ratio(k: int) -> float:
        return count_params(s, make(k)).ratio(denom)

    hi = 1
    while ratio(hi) < target_ratio:
        hi *= 2
        if hi > MAX_KNOB:
            raise SolverError(f"ratio {target_ratio} is unreachable with {knob} <= {MAX_KNOB}")
    lo = hi // 2 + 1 if hi > 1 else 1
    while lo < hi:
        mid = (lo + hi) // 2
        if ratio(mid) >= target_ratio:
            hi = mid
        else:
            lo = mid + 1
    return lo
