"""Report tables built from the results store.

Every report is a list of rows rendered two ways: a CSV file (``.`` decimal
point, no thousands separators, ratios and metrics to 4 significant digits)
and an aligned plain-text table.  Rendering is a pure function of the rows,
so the same results always give byte-identical files.

Rows that a report expects but the results do not contain are kept in the
table with every data cell set to ``MISSING`` and are listed in
:attr:`Report.gaps`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

from .accounting import count_params, reference_methods, resolve_shape
from .errors import ComparabilityError, ConfigError, MissingDataError
from .peft import LnAblation, PeftMethod
from .runner import ResultsStore, RunResult, write_atomic

KINDS = ("param_table", "unified_matrix", "ablation_matrix", "time_chart")
GAP = "MISSING"

# base rows of the unified matrix; each also appears combined with LN-tuning
UNIFIED_BASES = (
    "scaled_parallel_adapter_ffn",
    "seq_adapter_ffn",
    "seq_adapter_mha",
    "prefix",
    "mam",
    "bitfit",
)


def fmt(value) -> str:
    if value is None:
        return GAP
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if value != value:
            return "nan"
        return f"{value:.4g}"
    return str(value)


@dataclass
class Report:
    kind: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    gaps: list[str] = field(default_factory=list)
    extra: dict[str, list[list]] = field(default_factory=dict)

    def csv(self, rows=None, columns=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns or self.columns)
        for row in self.rows if rows is None else rows:
            w.writerow([fmt(v) for v in row])
        return buf.getvalue()

    def text(self) -> str:
        cells = [self.columns] + [[fmt(v) for v in row] for row in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.columns))]
        lines = []
        for n, row in enumerate(cells):
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip())
            if n == 0:
                lines.append("  ".join("-" * w for w in widths))
        if self.gaps:
            lines.append("")
            lines.append("missing rows: " + ", ".join(self.gaps))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        paths = [
            write_atomic(out_dir / f"{self.kind}.csv", self.csv()),
            write_atomic(out_dir / f"{self.kind}.txt", self.text()),
        ]
        for name, (columns, rows) in sorted(self.extra.items()):
            paths.append(write_atomic(out_dir / f"{self.kind}.{name}.csv", self.csv(rows, columns)))
        return paths


# -- row helpers -----------------------------------------------------------------------


def _index(results: list[RunResult]) -> dict[str, RunResult]:
    by_method: dict[str, RunResult] = {}
    for r in results:
        if r.method in by_method and by_method[r.method].fingerprint != r.fingerprint:
            raise ConfigError(
                f"two results for method {r.method} ({by_method[r.method].fingerprint}, {r.fingerprint}); "
                "select one experiment set with a sweep file"
            )
        by_method[r.method] = r
    return by_method


def _check_same_setting(results: list[RunResult]) -> None:
    keys = {(repr(sorted(r.shape.items())), repr(sorted(r.task.items()))) for r in results}
    if len(keys) > 1:
        raise ComparabilityError("results mix different shapes or tasks")


def _result_row(label: str, r: RunResult | None, n_cols: int) -> list:
    if r is None:
        return [label] + [None] * (n_cols - 1)
    a = r.accounting
    seeds = len(r.per_seed)
    return [
        label,
        a["trainable"],
        100.0 * a["ratio_total"],
        100.0 * a["ratio_no_embed"],
        100.0 * r.mean_metric,
        seeds,
        r.best_lr,
        r.fingerprint,
    ]


RESULT_COLUMNS = ["method", "trainable", "ratio_total_pct", "ratio_no_embed_pct",
                  "mean_metric_pct", "seeds", "best_lr", "fingerprint"]


def _matrix(kind: str, labels: list[str], results: list[RunResult]) -> Report:
    _check_same_setting(results)
    by_method = _index(results)
    report = Report(kind, RESULT_COLUMNS)
    for label in labels:
        r = by_method.get(label)
        if r is None:
            report.gaps.append(label)
        report.rows.append(_result_row(label, r, len(RESULT_COLUMNS)))
    return report


# -- reports ----------------------------------------------------------------------------


def unified_methods(prefix_len: int, bottleneck: int) -> list[PeftMethod]:
    """The twelve methods of the unified matrix: each base method, then with LN-tuning."""
    rows = []
    for kind in UNIFIED_BASES:
        knobs = {}
        if kind in ("prefix", "mam"):
            knobs["prefix_len"] = prefix_len
        if kind not in ("prefix", "bitfit"):
            knobs["bottleneck"] = bottleneck
        for add_ln in (False, True):
            rows.append(PeftMethod(kind, add_ln=add_ln, **knobs))
    return rows


def unified_labels() -> list[str]:
    return [kind + suffix for kind in UNIFIED_BASES for suffix in ("", "+ln")]


def unified_matrix(results: list[RunResult]) -> Report:
    return _matrix("unified_matrix", unified_labels(), results)


def ablation_rows(num_layers: int) -> list[PeftMethod]:
    half = num_layers // 2
    ablations = [
        None,
        LnAblation(term="gain_only"),
        LnAblation(term="bias_only"),
        LnAblation(module="mha_only"),
        LnAblation(module="ffn_only"),
        LnAblation(layers=(1, half)),
        LnAblation(layers=(half + 1, num_layers)),
    ]
    return [PeftMethod("ln", ablation=a) for a in ablations]


def ablation_matrix(results: list[RunResult]) -> Report:
    _check_same_setting(results)
    layers = results[0].shape["num_layers"]
    return _matrix("ablation_matrix", [m.name for m in ablation_rows(layers)], results)


def param_table(shape="bert-base-shape", methods: list[PeftMethod] | None = None,
                results: list[RunResult] | None = None) -> Report:
    """Trainable counts and both ratios; from results when given, else closed form for ``shape``."""
    columns = ["method", "trainable", "trainable_during_training", "total", "no_embed",
               "ratio_total_pct", "ratio_no_embed_pct"]
    report = Report("param_table", columns)
    if results:
        _check_same_setting(results)
        for r in sorted(results, key=lambda r: r.method):
            a = r.accounting
            report.rows.append([r.method, a["trainable"], a["trainable_during_training"], a["total"],
                                a["no_embed"], 100.0 * a["ratio_total"], 100.0 * a["ratio_no_embed"]])
        return report
    s = resolve_shape(shape)
    if methods is None:
        methods = reference_methods(shape) if isinstance(shape, str) and shape.endswith("-shape") else [
            PeftMethod("full"), PeftMethod("ln"), PeftMethod("bitfit"),
            PeftMethod("prefix", prefix_len=8), PeftMethod("scaled_parallel_adapter_ffn", bottleneck=8),
            PeftMethod("mam", prefix_len=8, bottleneck=8)]
    for m in methods:
        c = count_params(s, m)
        label = m.name
        if m.exclude_ln_biases:
            label += "[no_ln_bias]"
        if m.ln_scope != "blocks_only":
            label += "[+embed_ln]"
        if m.prefix_len is not None:
            label += f" l={m.prefix_len}"
        if m.bottleneck is not None:
            label += f" d_b={m.bottleneck}"
        report.rows.append([label, c.trainable, c.trainable_during_training, c.total, c.no_embed,
                            100.0 * c.ratio_total, 100.0 * c.ratio_no_embed])
    return report


def time_chart(results: list[RunResult], store: ResultsStore) -> Report:
    """Median step and batch times relative to full tuning (pinned at 100)."""
    _check_same_setting(results)
    by_method = _index(results)
    report = Report("time_chart", ["method", "train_pct", "infer_pct", "train_ms_per_step",
                                   "infer_ms_per_batch"])
    full = by_method.get("full")
    timings = {name: store.load_timings(r.fingerprint) for name, r in by_method.items()}
    if full is None or timings.get("full") is None:
        report.gaps.append("full")
        for name in sorted(by_method):
            report.rows.append([name, None, None, None, None])
        return report
    base = timings["full"]
    ordered = ["full"] + sorted(n for n in by_method if n != "full")
    pairs = []
    for name in ordered:
        t = timings[name]
        if t is None:
            report.gaps.append(name)
            report.rows.append([name, None, None, None, None])
            continue
        if t.comparability != base.comparability:
            raise ComparabilityError(f"{name} was timed under a different shape, batch size or task")
        if name == "full":
            train_pct = infer_pct = 100.0
        else:
            train_pct = 100.0 * t.train_median / base.train_median
            infer_pct = 100.0 * t.infer_median / base.infer_median
        report.rows.append([name, train_pct, infer_pct, 1e3 * t.train_median, 1e3 * t.infer_median])
        pairs.append([name, train_pct])
    report.extra["pairs"] = (["method", "percent"], pairs)
    return report


def build_report(kind: str, results: list[RunResult], store: ResultsStore | None = None) -> Report:
    if kind not in KINDS:
        raise ConfigError(f"unknown report kind {kind!r}; choose from {list(KINDS)}", "report.kind")
    if not results:
        raise MissingDataError(f"no results to build a {kind} report from")
    if kind == "param_table":
        return param_table(results=results)
    if kind == "unified_matrix":
        return unified_matrix(results)
    if kind == "ablation_matrix":
        return ablation_matrix(results)
    if store is None:
        raise ConfigError("time_chart needs the results store for timing sidecars")
    return time_chart(results, store)
