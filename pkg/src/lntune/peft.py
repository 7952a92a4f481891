"""PEFT method catalog: trainable-set selection and module injection.

A :class:`PeftMethod` is a declarative description; :func:`apply_method`
turns it into a :class:`ParameterGroup` for a concrete model, injecting
prefix nets and adapters as needed and flipping ``requires_grad`` so that
exactly the selected parameters are trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .transformer import ENCODER, TransformerModel, is_head_param

KINDS = (
    "full",
    "ln",
    "bitfit",
    "prefix",
    "seq_adapter_ffn",
    "seq_adapter_mha",
    "scaled_parallel_adapter_ffn",
    "mam",
    "head",
)
LN_SCOPES = ("blocks_only", "blocks_plus_embedding_ln")
PLACEMENTS = ("after_mha_sublayer", "after_ffn_sublayer", "parallel_ffn")

# method kind -> adapter placement it injects
ADAPTER_PLACEMENT = {
    "seq_adapter_ffn": "after_ffn_sublayer",
    "seq_adapter_mha": "after_mha_sublayer",
    "scaled_parallel_adapter_ffn": "parallel_ffn",
    "mam": "parallel_ffn",
}
_PLACEMENT_TAG = {"after_mha_sublayer": "mha", "after_ffn_sublayer": "ffn", "parallel_ffn": "parallel"}

DEFAULT_ADAPTER_SCALE = 4.0
PREFIX_INIT_STD = 1.0


@dataclass(frozen=True)
class LnAblation:
    term: str = "both"  # both | gain_only | bias_only
    module: str = "both"  # both | mha_only | ffn_only
    layers: tuple[int, int] | None = None  # inclusive, 1-based; None = all

    def __post_init__(self):
        if self.term not in ("both", "gain_only", "bias_only"):
            raise ConfigError(f"unknown term {self.term!r}", "ablation.term")
        if self.module not in ("both", "mha_only", "ffn_only"):
            raise ConfigError(f"unknown module {self.module!r}", "ablation.module")
        if self.layers is not None:
            lo, hi = self.layers
            if lo < 1 or hi < lo:
                raise ConfigError(f"bad layer range {self.layers}", "ablation.layers")

    @property
    def is_identity(self) -> bool:
        return self.term == "both" and self.module == "both" and self.layers is None

    def check(self, num_layers: int) -> None:
        if self.layers is not None and self.layers[1] > num_layers:
            raise ConfigError(
                f"layer range {self.layers} exceeds num_layers={num_layers}", "ablation.layers"
            )

    def keeps(self, layer: int, module: str, term: str) -> bool:
        if self.term != "both" and term != self.term.removesuffix("_only"):
            return False
        if self.module != "both" and module != self.module.removesuffix("_only"):
            return False
        if self.layers is not None and not self.layers[0] <= layer <= self.layers[1]:
            return False
        return True

    def label(self) -> str:
        parts = []
        if self.term != "both":
            parts.append(self.term)
        if self.module != "both":
            parts.append(self.module)
        if self.layers is not None:
            parts.append(f"layers_{self.layers[0]}-{self.layers[1]}")
        return ",".join(parts) or "none"


@dataclass(frozen=True)
class PeftMethod:
    kind: str
    add_ln: bool = False
    ln_scope: str = "blocks_only"
    ablation: LnAblation | None = None
    prefix_len: int | None = None
    bottleneck: int | None = None
    adapter_scale: float = DEFAULT_ADAPTER_SCALE
    exclude_ln_biases: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown method {self.kind!r}", "method.method")
        if self.ln_scope not in LN_SCOPES:
            raise ConfigError(f"unknown ln_scope {self.ln_scope!r}", "method.ln_scope")
        if self.add_ln and self.kind in ("full", "ln"):
            raise ConfigError(f"add_ln is meaningless for kind={self.kind}", "method.add_ln")
        if self.ablation is not None and not (self.kind == "ln" or self.add_ln):
            raise ConfigError(
                "an LN ablation needs kind=ln or add_ln=true", "method.ablation"
            )
        if self.uses_prefix and (self.prefix_len is None or self.prefix_len < 0):
            raise ConfigError(f"{self.kind} needs prefix_len >= 0", "method.prefix_len")
        if self.uses_adapter and (self.bottleneck is None or self.bottleneck < 1):
            raise ConfigError(f"{self.kind} needs bottleneck >= 1", "method.bottleneck")

    @property
    def uses_prefix(self) -> bool:
        return self.kind in ("prefix", "mam")

    @property
    def uses_adapter(self) -> bool:
        return self.kind in ADAPTER_PLACEMENT

    @property
    def tunes_ln(self) -> bool:
        return self.kind == "ln" or self.add_ln

    @property
    def effective_ablation(self) -> LnAblation:
        return self.ablation or LnAblation()

    @property
    def name(self) -> str:
        label = self.kind + ("+ln" if self.add_ln else "")
        if self.ablation is not None and not self.ablation.is_identity:
            label += f"[{self.ablation.label()}]"
        return label

    def base(self) -> "PeftMethod":
        """The same method without the +LN union."""
        return replace(self, add_ln=False, ablation=None)

    def to_flat(self) -> dict[str, str]:
        ab = self.ablation
        flat = {
            "method": self.kind,
            "add_ln": str(self.add_ln).lower(),
            "ln_scope": self.ln_scope,
            "prefix_len": "" if self.prefix_len is None else str(self.prefix_len),
            "bottleneck": "" if self.bottleneck is None else str(self.bottleneck),
            "adapter_scale": repr(float(self.adapter_scale)),
            "exclude_ln_biases": str(self.exclude_ln_biases).lower(),
        }
        if ab is not None:
            flat["ablation.term"] = ab.term
            flat["ablation.module"] = ab.module
            flat["ablation.layers"] = "all" if ab.layers is None else f"{ab.layers[0]}-{ab.layers[1]}"
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "PeftMethod":
        def opt_int(key):
            raw = str(flat.get(key, "")).strip()
            if raw in ("", "none"):
                return None
            try:
                return int(raw)
            except ValueError:
                raise ConfigError(f"expected an integer, got {raw!r}", f"method.{key}") from None

        def flag(key, default=False):
            raw = str(flat.get(key, str(default))).strip().lower()
            if raw not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"expected a boolean, got {raw!r}", f"method.{key}")
            return raw in ("true", "1", "yes")

        if "method" not in flat:
            raise ConfigError("missing key", "method.method")
        ablation = None
        if any(k.startswith("ablation.") for k in flat):
            layers_raw = str(flat.get("ablation.layers", "all")).strip()
            layers = None
            if layers_raw != "all":
                try:
                    lo, hi = (int(v) for v in layers_raw.split("-"))
                except ValueError:
                    raise ConfigError(
                        f"expected 'all' or 'lo-hi', got {layers_raw!r}", "method.ablation.layers"
                    ) from None
                layers = (lo, hi)
            ablation = LnAblation(
                term=flat.get("ablation.term", "both"),
                module=flat.get("ablation.module", "both"),
                layers=layers,
            )
        try:
            scale = float(flat.get("adapter_scale", DEFAULT_ADAPTER_SCALE))
        except ValueError:
            raise ConfigError("expected a number", "method.adapter_scale") from None
        return cls(
            kind=str(flat["method"]).strip(),
            add_ln=flag("add_ln"),
            ln_scope=str(flat.get("ln_scope", "blocks_only")).strip(),
            ablation=ablation,
            prefix_len=opt_int("prefix_len"),
            bottleneck=opt_int("bottleneck"),
            adapter_scale=scale,
            exclude_ln_biases=flag("exclude_ln_biases"),
        )


# -- injected modules ------------------------------------------------------


class PrefixNet:
    """Prefix embeddings reparameterized through a two-layer tanh MLP.

    Produces per-layer key/value prefixes ``[L, 2, l, H]``.
    """

    def __init__(self, num_layers: int, hidden: int, prefix_len: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        mid = 4 * hidden
        self.num_layers = num_layers
        self.hidden = hidden
        self.prefix_len = prefix_len
        self.embedding = Tensor(rng.normal(0.0, PREFIX_INIT_STD, (prefix_len, hidden)))
        self.mlp: dict[str, Tensor] | None = {
            "in.weight": Tensor(rng.normal(0.0, 0.02, (hidden, mid))),
            "in.bias": Tensor(np.zeros(mid)),
            "out.weight": Tensor(rng.normal(0.0, 0.02, (mid, num_layers * 2 * hidden))),
            "out.bias": Tensor(np.zeros(num_layers * 2 * hidden)),
        }
        self.collapsed: np.ndarray | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"peft.prefix.embedding": self.embedding}
        if self.mlp is not None:
            out.update({f"peft.prefix.mlp.{k}": v for k, v in self.mlp.items()})
        return out

    def run_mlp(self) -> Tensor:
        if self.mlp is None:
            raise ConfigError("prefix MLP was dropped at collapse")
        m = self.mlp
        hid = ad.tanh(ad.matmul(self.embedding, m["in.weight"]) + m["in.bias"])
        flat = ad.matmul(hid, m["out.weight"]) + m["out.bias"]
        kv = ad.reshape(flat, (self.prefix_len, self.num_layers, 2, self.hidden))
        return ad.transpose(kv, (1, 2, 0, 3))

    def past_key_values(self) -> Tensor:
        if self.collapsed is not None:
            return Tensor(self.collapsed)
        return self.run_mlp()


def collapse_prefix(net: PrefixNet, drop_mlp: bool = False) -> PrefixNet:
    """Materialize the MLP output as a fixed past-key/value buffer."""
    if net.collapsed is None:
        with ad.no_grad():
            net.collapsed = net.run_mlp().data.copy()
    if drop_mlp:
        net.mlp = None
    return net


@dataclass
class Adapter:
    down: Tensor  # [H, d_b]
    down_bias: Tensor
    up: Tensor  # [d_b, H], zero-initialized
    up_bias: Tensor
    placement: str
    scale: float = 1.0

    @classmethod
    def create(cls, hidden: int, bottleneck: int, placement: str, scale: float = 1.0, seed: int = 0):
        if placement not in PLACEMENTS:
            raise ConfigError(f"unknown adapter placement {placement!r}")
        rng = np.random.default_rng(seed)
        return cls(
            down=Tensor(rng.normal(0.0, 0.02, (hidden, bottleneck))),
            down_bias=Tensor(np.zeros(bottleneck)),
            up=Tensor(np.zeros((bottleneck, hidden))),
            up_bias=Tensor(np.zeros(hidden)),
            placement=placement,
            scale=scale if placement == "parallel_ffn" else 1.0,
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.down.weight": self.down,
            f"{prefix}.down.bias": self.down_bias,
            f"{prefix}.up.weight": self.up,
            f"{prefix}.up.bias": self.up_bias,
        }

    def bottleneck_out(self, x) -> Tensor:
        hid = ad.gelu(ad.matmul(x, self.down) + self.down_bias)
        return ad.matmul(hid, self.up) + self.up_bias


def adapter_forward(h, a: Adapter, x_sublayer_input=None) -> Tensor:
    """Apply an adapter to a sublayer output ``h``.

    Sequential placements return ``h + up(gelu(down(h)))``.  The parallel
    placement needs the FFN input ``x`` and returns ``h + s * up(gelu(down(x)))``
    where ``h`` is the FFN output.
    """
    if a.placement == "parallel_ffn":
        if x_sublayer_input is None:
            raise ConfigError("a parallel adapter needs the FFN input")
        return ad.add(h, ad.scale(a.bottleneck_out(x_sublayer_input), a.scale))
    if x_sublayer_input is not None:
        raise ConfigError(f"a {a.placement} adapter takes no sublayer input")
    return ad.add(h, a.bottleneck_out(h))


@dataclass
class PeftState:
    prefix: PrefixNet | None = None
    adapters: dict[tuple[int, str], Adapter] = field(default_factory=dict)

    def adapter(self, layer: int, placement: str) -> Adapter | None:
        return self.adapters.get((layer, placement))

    def past_key_values(self) -> Tensor | None:
        return None if self.prefix is None else self.prefix.past_key_values()

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.prefix is not None:
            out.update(self.prefix.named_parameters())
        for (layer, placement), a in sorted(self.adapters.items()):
            out.update(a.named_parameters(f"peft.adapter.layer.{layer}.{_PLACEMENT_TAG[placement]}"))
        return out

    def modules(self) -> list:
        mods: list = [self.prefix] if self.prefix is not None else []
        return mods + [a for _, a in sorted(self.adapters.items())]


@dataclass(frozen=True)
class ParameterGroup:
    trainable_names: frozenset[str]
    all_names: frozenset[str]
    injected_modules: tuple = ()
    method: PeftMethod | None = None

    def __post_init__(self):
        extra = self.trainable_names - self.all_names
        if extra:
            raise ConfigError(f"trainable names not in the model: {sorted(extra)}")

    @property
    def frozen_names(self) -> frozenset[str]:
        return self.all_names - self.trainable_names

    def trainable(self, model: TransformerModel) -> dict[str, Tensor]:
        params = model.named_parameters()
        return {k: params[k] for k in sorted(self.trainable_names)}

    def count(self, model: TransformerModel) -> int:
        return sum(t.size for t in self.trainable(model).values())


# -- selection -----------------------------------------------------------------


def ln_names(model_or_shape, method: PeftMethod) -> set[str]:
    """LayerNorm gain/bias names selected by LN-tuning under ``method``'s scope and ablation."""
    shape = getattr(model_or_shape, "shape", model_or_shape)
    ablation = method.effective_ablation
    ablation.check(shape.num_layers)
    names = set()
    for i in range(1, shape.num_layers + 1):
        for module in ("mha", "ffn"):
            for term in ("gain", "bias"):
                if ablation.keeps(i, module, term):
                    names.add(f"layer.{i}.ln_{module}.{term}")
    if method.ln_scope == "blocks_plus_embedding_ln" and ablation.module == "both" and ablation.layers is None:
        for term in ("gain", "bias"):
            if ablation.term in ("both", f"{term}_only"):
                names.add(f"embed.ln.{term}")
    return names


def _is_ln_name(name: str) -> bool:
    return ".ln_" in name or name.startswith("embed.ln.")


def bitfit_names(base_names, exclude_ln_biases: bool = False) -> set[str]:
    return {
        n
        for n in base_names
        if n.endswith(".bias") and not is_head_param(n) and not (exclude_ln_biases and _is_ln_name(n))
    }


def select_trainable(model: TransformerModel, method: PeftMethod, include_head: bool = True) -> set[str]:
    """Trainable names for ``method`` on a model that already carries its injections."""
    base = set(model.params)
    injected = set(model.peft.named_parameters()) if model.peft is not None else set()
    head = {n for n in base if is_head_param(n)}
    kind = method.kind
    if kind == "full":
        names = base | injected
    elif kind == "ln":
        names = ln_names(model, method)
    elif kind == "bitfit":
        names = bitfit_names(base, method.exclude_ln_biases)
    elif kind == "head":
        if not head:
            raise ConfigError("kind=head needs an encoder-classifier model", "method.method")
        names = set()
    else:
        names = set(injected)
    if method.add_ln:
        names |= ln_names(model, method)
    if include_head:
        names |= head
    return names


def apply_method(
    model: TransformerModel, method: PeftMethod, seed: int = 0, include_head: bool = True
) -> ParameterGroup:
    """Inject ``method``'s modules into ``model`` and mark its trainable set.

    Any previous injection is replaced.
    """
    shape = model.shape
    if method.tunes_ln:
        method.effective_ablation.check(shape.num_layers)
    if method.kind == "head" and shape.arch != ENCODER:
        raise ConfigError("kind=head needs an encoder-classifier model", "method.method")
    state = PeftState()
    if method.uses_prefix:
        state.prefix = PrefixNet(shape.num_layers, shape.hidden, method.prefix_len, seed=seed + 1)
    if method.uses_adapter:
        placement = ADAPTER_PLACEMENT[method.kind]
        for i in range(1, shape.num_layers + 1):
            state.adapters[(i, placement)] = Adapter.create(
                shape.hidden, method.bottleneck, placement, method.adapter_scale, seed=seed + 100 + i
            )
    model.peft = state if (state.prefix is not None or state.adapters) else None
    trainable = select_trainable(model, method, include_head=include_head)
    params = model.named_parameters()
    for name, t in params.items():
        t.name = name
        t.requires_grad = name in trainable
        t.grad = None
    return ParameterGroup(
        trainable_names=frozenset(trainable),
        all_names=frozenset(params),
        injected_modules=tuple(state.modules()),
        method=method,
    )
