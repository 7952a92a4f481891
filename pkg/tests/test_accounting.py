import numpy as np
import pytest

from lntune.accounting import (
    PRESETS,
    count_params,
    embedding_params,
    reference_methods,
    solve_alignment,
)
from lntune.errors import ConfigError, SolverError
from lntune.peft import LnAblation, PeftMethod, apply_method, collapse_prefix
from lntune.transformer import TransformerModel, is_embedding_param, is_head_param

METHODS = [
    PeftMethod("full"),
    PeftMethod("ln"),
    PeftMethod("ln", ln_scope="blocks_plus_embedding_ln"),
    PeftMethod("ln", ablation=LnAblation("gain_only", "ffn_only", (2, 3))),
    PeftMethod("bitfit"),
    PeftMethod("bitfit", exclude_ln_biases=True),
    PeftMethod("bitfit", add_ln=True),
    PeftMethod("prefix", prefix_len=5),
    PeftMethod("prefix", prefix_len=5, add_ln=True),
    PeftMethod("seq_adapter_ffn", bottleneck=6),
    PeftMethod("seq_adapter_mha", bottleneck=6, add_ln=True),
    PeftMethod("scaled_parallel_adapter_ffn", bottleneck=6),
    PeftMethod("mam", prefix_len=3, bottleneck=7),
    PeftMethod("mam", prefix_len=3, bottleneck=7, add_ln=True,
               ablation=LnAblation(term="bias_only")),
    PeftMethod("head"),
]


def enumerate_counts(preset, method):
    """Count by instantiating the model and walking its tensors."""
    model = TransformerModel.initialize(PRESETS[preset], seed=0)
    group = apply_method(model, method, include_head=True)
    prefix = model.peft.prefix if model.peft is not None else None
    collapsed = 0
    during_prefix = 0
    if prefix is not None:
        during_prefix = sum(t.size for t in prefix.named_parameters().values())
        collapsed = collapse_prefix(prefix).collapsed.size
    params = model.named_parameters()
    prefix_names = {n for n in params if n.startswith("peft.prefix.")}
    persisted = {n: t.size for n, t in params.items() if n not in prefix_names}
    total = sum(persisted.values()) + collapsed
    emb = sum(t.size for n, t in params.items() if is_embedding_param(n))
    if method.kind == "full":
        trainable = total
    else:
        trainable = sum(persisted[n] for n in group.trainable_names
                        if n in persisted and not is_head_param(n)) + collapsed
    # while training, the prefix is its embedding plus MLP rather than the collapsed buffer
    during = trainable - collapsed + during_prefix
    return trainable, during, total, total - emb


@pytest.mark.parametrize("preset", ["desk-base", "desk-large"])
@pytest.mark.parametrize("method", METHODS, ids=lambda m: m.name)
def test_closed_form_matches_enumeration(preset, method):
    trainable, during, total, no_embed = enumerate_counts(preset, method)
    c = count_params(preset, method)
    assert (c.trainable, c.trainable_during_training, c.total, c.no_embed) == (
        trainable, during, total, no_embed)


def test_desk_base_ln():
    c = count_params("desk-base", PeftMethod("ln"))
    assert c.trainable == 1024
    assert c.head == 64 * 2 + 2


@pytest.mark.parametrize(
    "preset, method, expected",
    [
        ("bert-base-shape", PeftMethod("ln"), 36_864),
        ("bert-large-shape", PeftMethod("ln"), 98_304),
        ("bert-base-shape", PeftMethod("prefix", prefix_len=16), 294_912),
    ],
)
def test_reference_counts(preset, method, expected):
    assert count_params(preset, method).trainable == expected


def test_full_no_embed_ratio_is_one():
    c = count_params("bert-base-shape", PeftMethod("full"))
    assert c.ratio_total == 1.0 and c.ratio_no_embed == 1.0


def test_no_embed_denominator():
    s = PRESETS["bert-base-shape"]
    c = count_params(s, PeftMethod("ln"))
    assert c.total - c.no_embed == embedding_params(s) == (30522 + 512) * 768


def test_unknown_denominator():
    with pytest.raises(ConfigError):
        count_params("desk-base", PeftMethod("ln")).ratio("per-layer")


def test_unknown_preset():
    with pytest.raises(ConfigError):
        count_params("bert-huge-shape", PeftMethod("ln"))


def test_alignment_on_bert_base():
    prefix_ratio = count_params("bert-base-shape", PeftMethod("prefix", prefix_len=16)).ratio_total
    assert solve_alignment("bert-base-shape", prefix_ratio, "bottleneck") == 16
    adapter_ratio = count_params(
        "bert-base-shape", PeftMethod("scaled_parallel_adapter_ffn", bottleneck=16)).ratio_total
    assert solve_alignment("bert-base-shape", adapter_ratio, "prefix_len") == 17


@pytest.mark.parametrize("knob", ["prefix_len", "bottleneck"])
def test_ratio_strictly_increasing(knob):
    make = {"prefix_len": lambda k: PeftMethod("prefix", prefix_len=k),
            "bottleneck": lambda k: PeftMethod("scaled_parallel_adapter_ffn", bottleneck=k)}[knob]
    ratios = [count_params("bert-base-shape", make(k)).ratio_total for k in range(1, 65)]
    assert np.all(np.diff(ratios) > 0)


@pytest.mark.parametrize("k", [1, 7, 16, 33, 64])
def test_alignment_inverts_ratio(k):
    r = count_params("bert-large-shape", PeftMethod("prefix", prefix_len=k)).ratio_total
    assert solve_alignment("bert-large-shape", r, "prefix_len") == k


@pytest.mark.parametrize("target", [0.0, -0.1])
def test_alignment_rejects_non_positive_target(target):
    with pytest.raises(SolverError):
        solve_alignment("bert-base-shape", target, "bottleneck")


def test_alignment_unreachable():
    with pytest.raises(SolverError):
        solve_alignment("desk-base", 1e9, "bottleneck")


def test_reference_methods_cover_catalog():
    kinds = {m.kind for m in reference_methods("bert-base-shape")}
    assert kinds == {"full", "scaled_parallel_adapter_ffn", "prefix", "mam", "bitfit", "ln"}
