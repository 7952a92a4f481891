"""Post-LN Transformer: encoder classifier and decoder language model.

Parameter names follow one canonical scheme (layers are numbered from 1)::

    embed.token  embed.position  embed.ln.{gain,bias}
    layer.{i}.mha.{query,key,value,output}.{weight,bias}
    layer.{i}.ln_mha.{gain,bias}
    layer.{i}.ffn.{in,out}.{weight,bias}
    layer.{i}.ln_ffn.{gain,bias}
    head.{weight,bias}                      (encoder-classifier only)

The decoder's output projection and the encoder's masked-LM projection are
tied to ``embed.token``.  Injected PEFT modules (see :mod:`lntune.peft`) live
under ``peft.*`` and are attached through ``model.peft``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, LengthError

if TYPE_CHECKING:
    from .peft import PeftState

ENCODER = "encoder-classifier"
DECODER = "decoder-lm"
ARCHS = (ENCODER, DECODER)

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelShape:
    num_layers: int
    hidden: int
    heads: int
    ffn_dim: int
    vocab: int
    max_len: int
    arch: str = ENCODER
    num_classes: int = 2

    def __post_init__(self):
        for name in ("num_layers", "hidden", "heads", "ffn_dim", "vocab", "max_len", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}", f"shape.{name}")
        if self.hidden % self.heads:
            raise ConfigError(
                f"hidden={self.hidden} is not divisible by heads={self.heads}", "shape.heads"
            )
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}", "shape.arch")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelShape":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    epsilon: float = LN_EPS

    def __post_init__(self):
        if self.gain.ndim != 1 or self.gain.shape != self.bias.shape:
            raise DimensionError(
                f"gain {self.gain.shape} and bias {self.bias.shape} must be equal-length vectors"
            )
        if not self.epsilon > 0:
            raise ContractError("epsilon must be positive")

    @classmethod
    def identity(cls, hidden: int, epsilon: float = LN_EPS) -> "LayerNormParams":
        return cls(Tensor(np.ones(hidden)), Tensor(np.zeros(hidden)), epsilon)


def layer_norm(x, p: LayerNormParams) -> Tensor:
    return ad.layer_norm(x, p.gain, p.bias, p.epsilon)


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, weight)
    return y if bias is None else y + bias


def base_parameter_shapes(shape: ModelShape) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape for every base-model parameter, in creation order."""
    h, f = shape.hidden, shape.ffn_dim
    out: dict[str, tuple[int, ...]] = {
        "embed.token": (shape.vocab, h),
        "embed.position": (shape.max_len, h),
        "embed.ln.gain": (h,),
        "embed.ln.bias": (h,),
    }
    for i in range(1, shape.num_layers + 1):
        p = f"layer.{i}"
        for proj in ("query", "key", "value", "output"):
            out[f"{p}.mha.{proj}.weight"] = (h, h)
            out[f"{p}.mha.{proj}.bias"] = (h,)
        out[f"{p}.ln_mha.gain"] = (h,)
        out[f"{p}.ln_mha.bias"] = (h,)
        out[f"{p}.ffn.in.weight"] = (h, f)
        out[f"{p}.ffn.in.bias"] = (f,)
        out[f"{p}.ffn.out.weight"] = (f, h)
        out[f"{p}.ffn.out.bias"] = (h,)
        out[f"{p}.ln_ffn.gain"] = (h,)
        out[f"{p}.ln_ffn.bias"] = (h,)
    if shape.arch == ENCODER:
        out["head.weight"] = (h, shape.num_classes)
        out["head.bias"] = (shape.num_classes,)
    return out


def is_embedding_param(name: str) -> bool:
    return name in ("embed.token", "embed.position")


def is_head_param(name: str) -> bool:
    return name.startswith("head.")


class TransformerModel:
    def __init__(self, shape: ModelShape, params: dict[str, Tensor]):
        expected = base_parameter_shapes(shape)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, t in params.items():
            if t.shape != expected[name]:
                raise DimensionError(f"{name}: expected {expected[name]}, got {t.shape}")
            t.name = name
        self.shape = shape
        self.params = params
        self.peft: PeftState | None = None

    @classmethod
    def initialize(cls, shape: ModelShape, seed: int = 0, head_init: str = "normal"):
        """Fresh model: normal(0, 0.02) weights, zero biases, LayerNorm gain=1 bias=0."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shp in base_parameter_shapes(shape).items():
            if name.endswith(".gain"):
                data = np.ones(shp)
            elif name.endswith(".bias"):
                data = np.zeros(shp)
            else:
                data = rng.normal(0.0, INIT_STD, size=shp)
            params[name] = Tensor(data)
        model = cls(shape, params)
        if shape.arch == ENCODER and head_init == "zeros":
            model.params["head.weight"].data[...] = 0.0
        return model

    def ln(self, prefix: str) -> LayerNormParams:
        return LayerNormParams(self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    def reset_head(self, num_classes: int | None = None, seed: int = 0, init: str = "normal"):
        """Replace the classification head (new task, possibly a new label count)."""
        if self.shape.arch != ENCODER:
            raise ConfigError("only encoder-classifier models carry a task head")
        if num_classes is not None and num_classes != self.shape.num_classes:
            from dataclasses import replace

            self.shape = replace(self.shape, num_classes=num_classes)
        c, h = self.shape.num_classes, self.shape.hidden
        rng = np.random.default_rng(seed)
        w = np.zeros((h, c)) if init == "zeros" else rng.normal(0.0, INIT_STD, size=(h, c))
        self.params["head.weight"] = Tensor(w, name="head.weight")
        self.params["head.bias"] = Tensor(np.zeros(c), name="head.bias")

    def named_parameters(self) -> dict[str, Tensor]:
        """Base parameters plus any injected PEFT parameters."""
        out = dict(self.params)
        if self.peft is not None:
            out.update(self.peft.named_parameters())
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def copy(self) -> "TransformerModel":
        """Deep copy of the base parameters (injected modules are not copied)."""
        return TransformerModel(
            self.shape, {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        )

    def __call__(self, tokens, **kw) -> Tensor:
        return forward(self, tokens, **kw)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, h = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, h // heads)), (0, 2, 1, 3))


def multi_head_attention(
    x: Tensor,
    model: TransformerModel,
    layer: int,
    past_kv: Tensor | None = None,
    causal: bool = False,
) -> Tensor:
    """Scaled dot-product self-attention for a batch ``x[B, T, H]``.

    ``past_kv[2, l, H]`` (keys, values) is prepended to the keys and values of
    every head; the causal mask never hides prefix positions.
    """
    p = model.params
    pre = f"layer.{layer}.mha"
    nh = model.shape.heads
    b, t, h = x.shape
    d = h // nh
    q = _split_heads(linear(x, p[f"{pre}.query.weight"], p[f"{pre}.query.bias"]), nh)
    k = _split_heads(linear(x, p[f"{pre}.key.weight"], p[f"{pre}.key.bias"]), nh)
    v = _split_heads(linear(x, p[f"{pre}.value.weight"], p[f"{pre}.value.bias"]), nh)
    n_prefix = 0
    if past_kv is not None:
        if past_kv.ndim != 3 or past_kv.shape[0] != 2 or past_kv.shape[2] != h:
            raise DimensionError(f"past_kv must be [2, l, {h}], got {past_kv.shape}")
        n_prefix = past_kv.shape[1]
        pk = ad.transpose(ad.reshape(past_kv[0], (n_prefix, nh, d)), (1, 0, 2))
        pv = ad.transpose(ad.reshape(past_kv[1], (n_prefix, nh, d)), (1, 0, 2))
        k = ad.concat([ad.broadcast_to(pk, (b, nh, n_prefix, d)), k], axis=2)
        v = ad.concat([ad.broadcast_to(pv, (b, nh, n_prefix, d)), v], axis=2)
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
    if causal:
        s = n_prefix + t
        mask = np.zeros((t, s))
        mask[:, n_prefix:][np.triu_indices(t, k=1)] = -1e30
        scores = scores + mask
    ctx = ad.matmul(ad.softmax(scores), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, h))
    return linear(ctx, p[f"{pre}.output.weight"], p[f"{pre}.output.bias"])


def feed_forward(x: Tensor, model: TransformerModel, layer: int) -> Tensor:
    p = model.params
    pre = f"layer.{layer}.ffn"
    hid = ad.gelu(linear(x, p[f"{pre}.in.weight"], p[f"{pre}.in.bias"]))
    return linear(hid, p[f"{pre}.out.weight"], p[f"{pre}.out.bias"])


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    ids = np.asarray(tokens)
    if ids.ndim == 1:
        return ids[None, :], True
    if ids.ndim != 2:
        raise ContractError(f"tokens must be a sequence or a batch of sequences, got {ids.shape}")
    return ids, False


def encode(model: TransformerModel, tokens, peft: "PeftState | None" = None) -> Tensor:
    """Final hidden states ``[B, T, H]`` for a batch of token ids."""
    from .peft import adapter_forward

    ids, _ = _as_batch(tokens)
    shape = model.shape
    _, t = ids.shape
    if t > shape.max_len:
        raise LengthError(f"sequence length {t} exceeds max_len {shape.max_len}")
    if t == 0:
        raise LengthError("empty sequence")
    if not np.issubdtype(ids.dtype, np.integer) or ids.min() < 0 or ids.max() >= shape.vocab:
        raise ContractError(f"token ids must be integers in [0, {shape.vocab})")
    peft = model.peft if peft is None else peft
    p = model.params
    x = ad.embedding(p["embed.token"], ids) + p["embed.position"][:t]
    x = layer_norm(x, model.ln("embed.ln"))
    causal = shape.arch == DECODER
    prefix_kv = peft.past_key_values() if peft is not None else None
    for i in range(1, shape.num_layers + 1):
        past = prefix_kv[i - 1] if prefix_kv is not None else None
        a = multi_head_attention(x, model, i, past_kv=past, causal=causal)
        if peft is not None and (ad_mha := peft.adapter(i, "after_mha_sublayer")) is not None:
            a = adapter_forward(a, ad_mha)
        x = layer_norm(x + a, model.ln(f"layer.{i}.ln_mha"))
        f = feed_forward(x, model, i)
        if peft is not None:
            if (ad_par := peft.adapter(i, "parallel_ffn")) is not None:
                f = adapter_forward(f, ad_par, x_sublayer_input=x)
            if (ad_ffn := peft.adapter(i, "after_ffn_sublayer")) is not None:
                f = adapter_forward(f, ad_ffn)
        x = layer_norm(x + f, model.ln(f"layer.{i}.ln_ffn"))
    return x


def lm_logits(model: TransformerModel, hidden: Tensor) -> Tensor:
    """Project hidden states onto the (tied) token embedding."""
    return ad.matmul(hidden, ad.transpose(model.params["embed.token"], (1, 0)))


def forward(model: TransformerModel, tokens, peft: "PeftState | None" = None, mlm: bool = False):
    """Logits for one sequence or a batch.

    encoder-classifier: ``[C]`` (or ``[B, C]``) from the first position; with
    ``mlm=True`` the tied masked-LM logits ``[T, V]`` instead.
    decoder-lm: next-token logits ``[T, V]`` (or ``[B, T, V]``).
    """
    _, single = _as_batch(tokens)
    hidden = encode(model, tokens, peft)
    if model.shape.arch == ENCODER and not mlm:
        pooled = hidden[:, 0, :]
        out = linear(pooled, model.params["head.weight"], model.params["head.bias"])
    else:
        out = lm_logits(model, hidden)
    return out[0] if single else out


@dataclass
class ParamSnapshot:
    """Copy of named parameter values, for bit-exact comparisons."""

    values: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def of(cls, params: dict[str, Tensor]) -> "ParamSnapshot":
        return cls({k: v.data.copy() for k, v in params.items()})

    def changed(self, params: dict[str, Tensor]) -> list[str]:
        return sorted(
            k for k, v in self.values.items() if k in params and not np.array_equal(v, params[k].data)
        )
