"""Synthetic pretraining corpora, downstream tasks, and their metrics.

All tasks share one token id space::

    0 PAD  1 CLS  2 SEP  3 MASK  4 BOS  5 EOS  6.. content tokens

Pretraining text comes from a seeded first-order Markov chain over the
content tokens.  Downstream tasks draw from the same chain, optionally
perturbed (``shift``), so a pretrained model has something to transfer:

* ``seq_classify``: ``[CLS] w1 .. wn``; the label is a hidden boolean
  function of two designated positions (membership in a hidden token set).
* ``kv_to_text``: ``[BOS] k v k v .. [SEP]`` in shuffled key order, mapped to
  the templated target ``t1 t2 v ... [EOS]`` in canonical key order.

Each split draws from its own seed stream derived from ``grammar_seed``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError
from .transformer import DECODER, ENCODER

PAD, CLS, SEP, MASK, BOS, EOS = range(6)
N_SPECIAL = 6

TASK_KINDS = ("mlm_pretrain", "clm_pretrain", "seq_classify", "kv_to_text")
SHIFT_KINDS = ("none", "token", "label")
LABEL_RULES = ("single", "and", "xor")
SPLITS = ("train", "val", "test")
_SPLIT_STREAM = {"train": 1, "val": 2, "test": 3}


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    vocab: int = 48
    grammar_seed: int = 0
    train: int = 2000
    val: int = 400
    test: int = 1000
    seq_len: int = 16
    shift: str = "none"
    shift_strength: float = 0.0
    label_rule: str = "and"
    n_keys: int = 3
    gen_max_len: int = 35
    concentration: float = 0.3

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}", "task.kind")
        if self.shift not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift {self.shift!r}", "task.shift")
        if self.label_rule not in LABEL_RULES:
            raise ConfigError(f"unknown label rule {self.label_rule!r}", "task.label_rule")
        if not 0.0 <= self.shift_strength <= 1.0:
            raise ConfigError("must lie in [0, 1]", "task.shift_strength")
        if self.vocab - N_SPECIAL < 4:
            raise ConfigError("vocab too small for the content alphabet", "task.vocab")
        if self.seq_len < 3:
            raise ConfigError("must be at least 3", "task.seq_len")
        if self.kind == "kv_to_text" and 3 * self.n_keys + self.n_keys > self.vocab - N_SPECIAL:
            raise ConfigError("too many keys for the vocabulary", "task.n_keys")
        for name in ("train", "val", "test"):
            if getattr(self, name) < 0:
                raise ConfigError("must be non-negative", f"task.{name}")

    @property
    def arch(self) -> str:
        return DECODER if self.kind in ("clm_pretrain", "kv_to_text") else ENCODER

    @property
    def is_pretraining(self) -> bool:
        return self.kind.endswith("_pretrain")

    @property
    def n_content(self) -> int:
        return self.vocab - N_SPECIAL

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)


def standard_transfer_task(vocab: int = 48, **overrides) -> SyntheticTask:
    """The desk transfer task: an ``and`` label rule under a 50% token-distribution shift."""
    fields = dict(kind="seq_classify", vocab=vocab, shift="token", shift_strength=0.5, label_rule="and")
    fields.update(overrides)
    return SyntheticTask(**fields)


@dataclass
class Split:
    inputs: np.ndarray  # [N, T] int64
    labels: np.ndarray | None = None  # [N] for classification
    targets: np.ndarray | None = None  # [N, Tt] for generation

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "Split":
        return Split(
            self.inputs[idx],
            None if self.labels is None else self.labels[idx],
            None if self.targets is None else self.targets[idx],
        )


@dataclass
class Dataset:
    task: SyntheticTask
    splits: dict[str, Split] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]

    @property
    def kind(self) -> str:
        return self.task.kind

    @property
    def arch(self) -> str:
        return self.task.arch


# -- grammar -------------------------------------------------------------------


@dataclass(frozen=True)
class MarkovGrammar:
    initial: np.ndarray  # [C]
    transition: np.ndarray  # [C, C], rows sum to 1

    def sample(self, rng: np.random.Generator, n: int, length: int) -> np.ndarray:
        """``n`` content-token sequences (ids offset by N_SPECIAL)."""
        c = len(self.initial)
        out = np.empty((n, length), dtype=np.int64)
        cum_init = np.cumsum(self.initial)
        cum_trans = np.cumsum(self.transition, axis=1)
        u = rng.random((n, length))
        state = np.minimum(np.searchsorted(cum_init, u[:, 0], side="right"), c - 1)
        out[:, 0] = state
        for t in range(1, length):
            rows = cum_trans[state]
            state = np.minimum((rows < u[:, t : t + 1]).sum(axis=1), c - 1)
            out[:, t] = state
        return out + N_SPECIAL


def _rng(task: SyntheticTask, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([task.grammar_seed, stream]))


def pretraining_grammar(task: SyntheticTask) -> MarkovGrammar:
    rng = _rng(task, 100)
    c = task.n_content
    return MarkovGrammar(
        initial=rng.dirichlet(np.ones(c)),
        transition=rng.dirichlet(np.full(c, task.concentration), size=c),
    )


def downstream_grammar(task: SyntheticTask) -> MarkovGrammar:
    base = pretraining_grammar(task)
    if task.shift != "token" or task.shift_strength == 0.0:
        return base
    rng = _rng(task, 101)
    c = task.n_content
    other = rng.dirichlet(np.full(c, task.concentration), size=c)
    s = task.shift_strength
    return MarkovGrammar(base.initial, (1.0 - s) * base.transition + s * other)


@dataclass(frozen=True)
class LabelRule:
    positions: tuple[int, int]
    token_set: frozenset[int]
    rule: str

    def __call__(self, tokens) -> int:
        tokens = np.asarray(tokens)
        a = int(tokens[self.positions[0]]) in self.token_set
        b = int(tokens[self.positions[1]]) in self.token_set
        if self.rule == "single":
            return int(a)
        if self.rule == "and":
            return int(a and b)
        return int(a != b)

    def batch(self, tokens: np.ndarray) -> np.ndarray:
        members = np.zeros(int(tokens.max(initial=0)) + 1, dtype=bool)
        for tok in self.token_set:
            if tok < len(members):
                members[tok] = True
        a = members[tokens[:, self.positions[0]]]
        b = members[tokens[:, self.positions[1]]]
        if self.rule == "single":
            return a.astype(np.int64)
        if self.rule == "and":
            return (a & b).astype(np.int64)
        return (a ^ b).astype(np.int64)


def label_rule(task: SyntheticTask) -> LabelRule:
    """The hidden labeling function of a ``seq_classify`` task."""
    rng = _rng(task, 102)
    c = task.n_content
    positions = tuple(sorted(int(p) for p in rng.choice(np.arange(1, task.seq_len), 2, replace=False)))
    members = rng.permutation(c)[: c // 2]
    if task.shift == "label" and task.shift_strength > 0:
        flip = rng.random(c) < task.shift_strength
        base = np.zeros(c, dtype=bool)
        base[members] = True
        members = np.flatnonzero(base ^ flip)
    return LabelRule(positions, frozenset(int(m) + N_SPECIAL for m in members), task.label_rule)


@dataclass(frozen=True)
class KvTemplate:
    keys: tuple[int, ...]
    templates: tuple[tuple[int, int], ...]
    values: tuple[int, ...]


def kv_template(task: SyntheticTask) -> KvTemplate:
    rng = _rng(task, 103)
    perm = rng.permutation(task.n_content) + N_SPECIAL
    k = task.n_keys
    keys = tuple(int(x) for x in perm[:k])
    templates = tuple((int(perm[k + 2 * i]), int(perm[k + 2 * i + 1])) for i in range(k))
    values = tuple(int(x) for x in perm[3 * k :])
    return KvTemplate(keys, templates, values)


# -- generation -----------------------------------------------------------------


def _split_sizes(task: SyntheticTask) -> dict[str, int]:
    return {"train": task.train, "val": task.val, "test": task.test}


def _sample_classify(task: SyntheticTask, rng, n: int) -> Split:
    grammar = downstream_grammar(task)
    rule = label_rule(task)
    per_class = [n // 2 + n % 2, n // 2]
    chosen: list[list[np.ndarray]] = [[], []]
    have = [0, 0]
    while have[0] < per_class[0] or have[1] < per_class[1]:
        body = grammar.sample(rng, max(64, n), task.seq_len - 1)
        seqs = np.concatenate([np.full((len(body), 1), CLS), body], axis=1)
        labels = rule.batch(seqs)
        for y in (0, 1):
            need = per_class[y] - have[y]
            if need > 0:
                rows = seqs[labels == y][:need]
                chosen[y].append(rows)
                have[y] += len(rows)
    x = np.concatenate([np.concatenate(chosen[0] or [np.empty((0, task.seq_len), np.int64)]),
                        np.concatenate(chosen[1] or [np.empty((0, task.seq_len), np.int64)])])
    y = np.concatenate([np.zeros(per_class[0], np.int64), np.ones(per_class[1], np.int64)])
    order = rng.permutation(len(x))
    return Split(x[order], labels=y[order])


def _sample_kv(task: SyntheticTask, rng, n: int) -> Split:
    tpl = kv_template(task)
    k = task.n_keys
    vals = np.asarray(tpl.values)[rng.integers(0, len(tpl.values), size=(n, k))]
    prompts = np.empty((n, 2 + 2 * k), dtype=np.int64)
    targets = np.empty((n, 3 * k + 1), dtype=np.int64)
    prompts[:, 0] = BOS
    prompts[:, -1] = SEP
    for i in range(n):
        order = rng.permutation(k)
        for j, key in enumerate(order):
            prompts[i, 1 + 2 * j] = tpl.keys[key]
            prompts[i, 2 + 2 * j] = vals[i, key]
        for key in range(k):
            targets[i, 3 * key : 3 * key + 2] = tpl.templates[key]
            targets[i, 3 * key + 2] = vals[i, key]
        targets[i, -1] = EOS
    return Split(prompts, targets=targets)


def _sample_pretrain(task: SyntheticTask, rng, n: int) -> Split:
    body = pretraining_grammar(task).sample(rng, n, task.seq_len - 1)
    first = CLS if task.kind == "mlm_pretrain" else BOS
    return Split(np.concatenate([np.full((n, 1), first), body], axis=1))


def generate_task(task: SyntheticTask) -> Dataset:
    """Deterministic dataset for ``task``; each split uses its own seed stream."""
    sampler = {
        "seq_classify": _sample_classify,
        "kv_to_text": _sample_kv,
        "mlm_pretrain": _sample_pretrain,
        "clm_pretrain": _sample_pretrain,
    }[task.kind]
    ds = Dataset(task)
    for name, n in _split_sizes(task).items():
        ds.splits[name] = sampler(task, _rng(task, _SPLIT_STREAM[name]), n)
    return ds


def export_jsonl(ds: Dataset, path) -> Path:
    """One JSON object per line: ``{"split", "tokens", "label"|"target"}``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for name in SPLITS:
            split = ds.splits.get(name)
            if split is None:
                continue
            for i in range(len(split)):
                rec = {"split": name, "tokens": split.inputs[i].tolist()}
                if split.labels is not None:
                    rec["label"] = int(split.labels[i])
                if split.targets is not None:
                    rec["target"] = split.targets[i].tolist()
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- metrics ---------------------------------------------------------------------


@dataclass(frozen=True)
class Metric:
    name: str
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ContractError(f"metric {self.name} out of [0, 1]: {self.value}")


def lcs_length(a, b) -> int:
    a, b = list(a), list(b)
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    """LCS F-measure with equal weight on precision and recall."""
    reference = list(reference)
    candidate = list(candidate)
    if not reference:
        raise ContractError("rouge_l needs a nonempty reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2 * p * r / (p + r)


def _logits(model, tokens) -> np.ndarray:
    out = model(tokens)
    return np.asarray(getattr(out, "data", out))


def greedy_decode(model, prompts: np.ndarray, max_new: int) -> list[list[int]]:
    """Greedy continuation of each prompt until EOS or ``max_new`` tokens (EOS dropped)."""
    seqs = np.asarray(prompts)
    limit = getattr(getattr(model, "shape", None), "max_len", None)
    done = np.zeros(len(seqs), dtype=bool)
    outs: list[list[int]] = [[] for _ in range(len(seqs))]
    with ad.no_grad():
        for _ in range(max_new):
            if limit is not None and seqs.shape[1] >= limit:
                break
            nxt = _logits(model, seqs)[:, -1, :].argmax(axis=-1)
            for i, tok in enumerate(nxt):
                if not done[i]:
                    if tok == EOS:
                        done[i] = True
                    else:
                        outs[i].append(int(tok))
            if done.all():
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return outs


def strip_target(target) -> list[int]:
    out = []
    for tok in target:
        if tok in (EOS, PAD):
            break
        out.append(int(tok))
    return out


def evaluate(model, dataset: Dataset, split: str = "test", batch_size: int = 256,
             max_new: int | None = None) -> list[Metric]:
    """Accuracy (classification) or mean ROUGE-L of greedy generations."""
    arch = model.shape.arch
    if arch != dataset.arch:
        raise ConfigError(f"task {dataset.kind} needs a {dataset.arch} model, got {arch}")
    data = dataset[split]
    if len(data) == 0:
        raise ContractError(f"split {split!r} is empty")
    if dataset.kind == "seq_classify":
        correct = 0
        with ad.no_grad():
            for lo in range(0, len(data), batch_size):
                logits = _logits(model, data.inputs[lo : lo + batch_size])
                correct += int((logits.argmax(axis=-1) == data.labels[lo : lo + batch_size]).sum())
        return [Metric("accuracy", correct / len(data))]
    if dataset.kind == "kv_to_text":
        max_new = dataset.task.gen_max_len if max_new is None else max_new
        scores = []
        for lo in range(0, len(data), batch_size):
            gens = greedy_decode(model, data.inputs[lo : lo + batch_size], max_new)
            for gen, tgt in zip(gens, data.targets[lo : lo + batch_size]):
                scores.append(rouge_l(gen, strip_target(tgt)))
        return [Metric("rouge_l", float(np.mean(scores)))]
    raise ConfigError(f"no downstream metric for task kind {dataset.kind}")
