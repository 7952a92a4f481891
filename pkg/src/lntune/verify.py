"""Invariant suites runnable from the command line (``lntune verify``).

Each check is small enough to run in seconds on the desk shape and returns
a :class:`CheckResult`; none of them needs a pretrained checkpoint.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .accounting import PRESETS, count_params
from .autodiff import Tensor
from .gradcheck import check_gradients
from .peft import Adapter, LnAblation, PeftMethod, apply_method, collapse_prefix, ln_names
from .tasks import standard_transfer_task, generate_task
from .train import Adam, task_loss
from .transformer import LayerNormParams, ModelShape, TransformerModel, forward, layer_norm

SMALL = ModelShape(num_layers=4, hidden=16, heads=2, ffn_dim=32, vocab=48, max_len=16)


def method_catalog(prefix_len: int = 2, bottleneck: int = 3) -> list[PeftMethod]:
    """Every method kind, each +LN variant, and the LN ablations on a 4-layer model."""
    base = [
        PeftMethod("full"),
        PeftMethod("ln"),
        PeftMethod("ln", ln_scope="blocks_plus_embedding_ln"),
        PeftMethod("bitfit"),
        PeftMethod("bitfit", exclude_ln_biases=True),
        PeftMethod("prefix", prefix_len=prefix_len),
        PeftMethod("seq_adapter_ffn", bottleneck=bottleneck),
        PeftMethod("seq_adapter_mha", bottleneck=bottleneck),
        PeftMethod("scaled_parallel_adapter_ffn", bottleneck=bottleneck),
        PeftMethod("mam", prefix_len=prefix_len, bottleneck=bottleneck),
        PeftMethod("head"),
    ]
    plus = [
        PeftMethod(m.kind, add_ln=True, prefix_len=m.prefix_len, bottleneck=m.bottleneck,
                   exclude_ln_biases=m.exclude_ln_biases)
        for m in base
        if m.kind not in ("full", "ln")
    ]
    return base + plus + [PeftMethod("ln", ablation=a) for a in ablation_variants(4)]


def ablation_variants(num_layers: int) -> list[LnAblation]:
    """Every term x module x layer-range combination with ranges {all, lower half, upper half}."""
    half = num_layers // 2
    ranges = [None, (1, half), (half + 1, num_layers)]
    return [
        LnAblation(term, module, layers)
        for term in ("both", "gain_only", "bias_only")
        for module in ("both", "mha_only", "ffn_only")
        for layers in ranges
        if (term, module, layers) != ("both", "both", None)
    ]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, ok, detail, time.perf_counter() - t0)


def check_layer_norm(rows: int = 1000, seed: int = 0) -> tuple[bool, str]:
    x = np.random.default_rng(seed).normal(0.0, 3.0, (rows, 64)) + 5.0
    p = LayerNormParams(Tensor(np.ones(64)), Tensor(np.zeros(64)), 1e-300)
    out = layer_norm(Tensor(x), p).data
    mean_err = float(np.abs(out.mean(axis=1)).max())
    var_err = float(np.abs(out.var(axis=1) - 1.0).max())
    hand = layer_norm(Tensor([1.0, 2.0, 3.0]), LayerNormParams(Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-300)).data
    hand_err = float(np.abs(hand - np.array([-1.22474, 0.0, 1.22474])).max())
    ok = mean_err < 1e-9 and var_err < 1e-6 and hand_err < 1e-5
    return ok, f"mean_err={mean_err:.2e} var_err={var_err:.2e} hand_err={hand_err:.2e}"


def _activate_adapters(group) -> None:
    """Nonzero up-projections so that gradients reach every adapter parameter."""
    rng = np.random.default_rng(0)
    for mod in group.injected_modules:
        if isinstance(mod, Adapter):
            mod.up.data[...] = rng.normal(0.0, 0.1, mod.up.shape)


def gradient_check(method: PeftMethod, shape: ModelShape = SMALL, samples: int = 3, seed: int = 0):
    model = TransformerModel.initialize(shape, seed=seed)
    group = apply_method(model, method, seed=seed)
    _activate_adapters(group)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, shape.vocab, (2, 6))
    labels = rng.integers(0, shape.num_classes, 2)
    params = group.trainable(model)
    return check_gradients(lambda: ad.cross_entropy(forward(model, tokens), labels), params, samples=samples, seed=seed)


def check_gradients_all(shape: ModelShape = SMALL, tol: float = 1e-4) -> tuple[bool, str]:
    """Finite-difference check of every trainable tensor under every catalog method."""
    worst, where = 0.0, ""
    for m in method_catalog():
        for r in gradient_check(m, shape):
            if r.worst > worst:
                worst, where = r.worst, f"{m.name}:{r.name}"
    return worst < tol, f"worst relative error {worst:.2e} at {where}"


def check_identity_at_init(shape: ModelShape = SMALL) -> tuple[bool, str]:
    tokens = np.random.default_rng(1).integers(0, shape.vocab, (3, 8))
    bad = []
    for m in method_catalog():
        if m.uses_prefix:
            m = PeftMethod(m.kind, add_ln=m.add_ln, prefix_len=0, bottleneck=m.bottleneck)
        model = TransformerModel.initialize(shape, seed=2)
        before = forward(model, tokens).data.tobytes()
        apply_method(model, m, seed=3)
        if forward(model, tokens).data.tobytes() != before:
            bad.append(m.name)
    return not bad, "bit-identical" if not bad else f"changed: {bad}"


def check_collapse(shape: ModelShape = SMALL) -> tuple[bool, str]:
    worst = 0.0
    for m in (PeftMethod("prefix", prefix_len=3), PeftMethod("mam", prefix_len=3, bottleneck=2, add_ln=True)):
        model = TransformerModel.initialize(shape, seed=4)
        apply_method(model, m, seed=5)
        tokens = np.random.default_rng(2).integers(0, shape.vocab, (3, 8))
        before = forward(model, tokens).data
        collapse_prefix(model.peft.prefix, drop_mlp=True)
        worst = max(worst, float(np.abs(forward(model, tokens).data - before).max()))
    return worst < 1e-12, f"max |delta logits| = {worst:.1e}"


def check_freezing(steps: int = 5, shape: ModelShape = SMALL) -> tuple[bool, str]:
    ds = generate_task(standard_transfer_task(shape.vocab, train=64, val=0, test=0))
    batch = ds["train"].subset(slice(0, 16))
    bad = []
    for m in method_catalog():
        model = TransformerModel.initialize(shape, seed=6)
        group = apply_method(model, m, seed=6)
        params = model.named_parameters()
        before = {n: params[n].data.copy() for n in group.frozen_names}
        opt = Adam(group.trainable(model))
        for _ in range(steps):
            opt.zero_grad()
            ad.backward(task_loss(model, ds, batch))
            opt.step(1e-2)
        if any(not np.array_equal(before[n], params[n].data) for n in before):
            bad.append(m.name)
    return not bad, "frozen parameters unchanged" if not bad else f"moved under: {bad}"


def check_accounting() -> tuple[bool, str]:
    shape = PRESETS["desk-base"]
    bad = []
    for m in method_catalog():
        model = TransformerModel.initialize(shape, seed=0)
        group = apply_method(model, m, include_head=False)
        enumerated = group.count(model)
        if m.uses_prefix:
            prefix = model.peft.prefix
            enumerated += collapse_prefix(prefix).collapsed.size
            enumerated -= sum(t.size for t in prefix.named_parameters().values())
        expected = count_params(shape, m).trainable
        if enumerated != expected:
            bad.append(f"{m.name}: {enumerated} != {expected}")
    ok_bert = count_params("bert-base-shape", PeftMethod("ln")).trainable == 36_864
    return not bad and ok_bert, "closed form matches enumeration" if not bad else "; ".join(bad)


def check_partitions() -> tuple[bool, str]:
    shape = PRESETS["desk-base"]
    full = ln_names(shape, PeftMethod("ln"))

    def names(**kw):
        return ln_names(shape, PeftMethod("ln", ablation=LnAblation(**kw)))

    g, b = names(term="gain_only"), names(term="bias_only")
    a, f = names(module="mha_only"), names(module="ffn_only")
    ok = g.isdisjoint(b) and g | b == full and a.isdisjoint(f) and a | f == full
    return ok, "gain|bias and mha|ffn partition the LN set" if ok else "partition violated"


SUITES: dict[str, Callable[[], tuple[bool, str]]] = {
    "layer_norm": check_layer_norm,
    "gradients": check_gradients_all,
    "identity_at_init": check_identity_at_init,
    "prefix_collapse": check_collapse,
    "freezing": check_freezing,
    "accounting": check_accounting,
    "ablation_partitions": check_partitions,
}


def run_suites(names=None) -> list[CheckResult]:
    return [_timed(n, SUITES[n]) for n in (names or SUITES)]
