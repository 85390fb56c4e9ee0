"""Aggregate mining and evaluation records into CSV/JSON analysis tables.

Every writer here is byte-deterministic: rows come out in a fixed order and
floats are written with ``repr``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import metrics, pruning
from .metrics import DropRecord, SegMetrics
from .unet import Model

SCHEMA_VERSION = 1
GROUP_KEYS = ("sex", "age_group", "subgroup")

DISPARITY_COLUMNS = ("group_by", "group", "n", "n_htl", "dataset_share", "htl_share", "enrichment",
                     "mean_drop_fg", "mean_drop_bg")
DROP_SUMMARY_COLUMNS = ("ratio", "n", "mean_drop_fg", "mean_drop_bg", "pct_drop_fg", "pct_drop_bg")
COMPARISON_COLUMNS = ("method", "n_runs", "iou_background", "iou_foreground", "mean_iou", "dice",
                      "std_iou_background", "std_iou_foreground", "std_mean_iou", "std_dice")
ABLATION_COLUMNS = ("prune_method", "ratio", "fg_iou", "delta_vs_full")


@dataclass
class DisparityRow:
    group_by: str
    group: str
    n: int
    n_htl: int
    dataset_share: float
    htl_share: float | None  # None when the HTL set is empty
    enrichment: float | None
    mean_drop_fg: float | None
    mean_drop_bg: float | None


@dataclass
class DisparityReport:
    rows: list[DisparityRow]
    n_samples: int
    n_htl: int

    def get(self, group_by: str, group: str) -> DisparityRow:
        for r in self.rows:
            if r.group_by == group_by and r.group == group:
                return r
        raise KeyError((group_by, group))

    def enrichment(self, group_by: str, group: str) -> float | None:
        return self.get(group_by, group).enrichment


@dataclass
class AblationRow:
    prune_method: str
    ratio: float
    fg_iou: float
    delta_vs_full: float


@dataclass
class AblationReport:
    rows: list[AblationRow] = field(default_factory=list)

    def fg(self, method: str, ratio: float) -> float:
        for r in self.rows:
            if r.prune_method == method and r.ratio == ratio:
                return r.fg_iou
        raise KeyError((method, ratio))


@dataclass
class RunResult:
    """One evaluated pipeline: a method name, the seed, and held-out metrics."""

    method: str
    seed: int
    metrics: SegMetrics


def _metadata_lookup(metadata) -> dict[str, dict]:
    if isinstance(metadata, Mapping):
        return {str(k): dict(v) for k, v in metadata.items()}
    out = {}
    for s in metadata:
        out[s.id] = s.metadata() if hasattr(s, "metadata") else dict(s)
    return out


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def demographic_report(records, metadata, drops: Sequence[DropRecord] | None = None,
                       group_keys: Sequence[str] = GROUP_KEYS) -> DisparityReport:
    """Dataset share, HTL share and enrichment per demographic group.

    ``records`` are HtlRecords (or anything with ``sample_id`` and
    ``is_htl``); ``metadata`` maps ids to attribute dicts, or is a list of
    samples. Missing attributes fall under ``"unknown"``. Groups are sorted
    by name within each key.
    """
    meta = _metadata_lookup(metadata)
    drop_by_id = {d.sample_id: d for d in drops or []}
    n = len(records)
    htl_ids = {r.sample_id for r in records if r.is_htl}
    rows = []
    for key in group_keys:
        members: dict[str, list[str]] = {}
        for r in records:
            g = meta.get(r.sample_id, {}).get(key)
            members.setdefault("unknown" if g is None else str(g), []).append(r.sample_id)
        for g in sorted(members):
            ids = members[g]
            n_htl = sum(i in htl_ids for i in ids)
            ds = len(ids) / n
            hs = n_htl / len(htl_ids) if htl_ids else None
            fg = [drop_by_id[i].drop_fg for i in ids if i in drop_by_id]
            bg = [drop_by_id[i].drop_bg for i in ids if i in drop_by_id]
            rows.append(DisparityRow(key, g, len(ids), n_htl, ds, hs, None if hs is None else hs / ds,
                                     _mean(fg), _mean(bg)))
    return DisparityReport(rows, n, len(htl_ids))


def subgroup_enrichment(records, metadata, group: str, key: str = "subgroup") -> float | None:
    return demographic_report(records, metadata, group_keys=(key,)).enrichment(key, group)


@dataclass
class DropSummaryRow:
    ratio: float
    n: int
    mean_drop_fg: float
    mean_drop_bg: float

    @property
    def pct_drop_fg(self) -> float:
        return 100.0 * self.mean_drop_fg

    @property
    def pct_drop_bg(self) -> float:
        return 100.0 * self.mean_drop_bg


def drop_summary(drops_by_ratio: Mapping[float, Sequence[DropRecord]]) -> list[DropSummaryRow]:
    """Mean relative foreground and background drop per prune ratio, ascending."""
    rows = []
    for ratio in sorted(drops_by_ratio):
        ds = drops_by_ratio[ratio]
        if not ds:
            raise ValueError(f"no drop records at ratio {ratio}")
        rows.append(DropSummaryRow(float(ratio), len(ds), float(np.mean([d.drop_fg for d in ds])),
                                   float(np.mean([d.drop_bg for d in ds]))))
    return rows


def drop_sweep(model: Model, samples, ratios: Iterable[float], method: str = "unstructured-magnitude",
               seed: int = 0) -> dict[float, list[DropRecord]]:
    out = {}
    for p in ratios:
        out[float(p)] = metrics.degradation_table(model, pruning.make_mask(model, method, p, seed), samples)
    return out


@dataclass
class ComparisonRow:
    method: str
    n_runs: int
    iou_background: float
    iou_foreground: float
    mean_iou: float
    dice: float
    std_iou_background: float | None = None
    std_iou_foreground: float | None = None
    std_mean_iou: float | None = None
    std_dice: float | None = None


_METRIC_FIELDS = ("iou_background", "iou_foreground", "mean_iou", "dice")


def comparison_table(runs: Sequence[RunResult]) -> list[ComparisonRow]:
    """Per-method means over runs (seeds); sample std (n-1) once a method has two or more runs.

    Methods keep their first-appearance order.
    """
    by_method: dict[str, list[SegMetrics]] = {}
    for r in runs:
        by_method.setdefault(r.method, []).append(r.metrics)
    rows = []
    for method, ms in by_method.items():
        vals = {f: np.array([getattr(m, f) for m in ms]) for f in _METRIC_FIELDS}
        row = ComparisonRow(method, len(ms), *(float(vals[f].mean()) for f in _METRIC_FIELDS))
        if len(ms) >= 2:
            for f in _METRIC_FIELDS:
                setattr(row, f"std_{f}", float(vals[f].std(ddof=1)))
        rows.append(row)
    return rows


def ablation_report(model: Model, samples, ratios: Sequence[float] = (0.7,),
                    methods: Sequence[str] = pruning.METHODS, seed: int = 0) -> AblationReport:
    """Mean foreground IoU after each pruning method, with the dense model as the first row."""
    full_fg, _ = metrics.per_sample_iou(model, samples)
    base = float(full_fg.mean())
    rows = [AblationRow("full", 0.0, base, 0.0)]
    for method in methods:
        for p in ratios:
            with pruning.masked(model, pruning.make_mask(model, method, p, seed)):
                fg, _ = metrics.per_sample_iou(model, samples)
            rows.append(AblationRow(method, float(p), float(fg.mean()), float(fg.mean()) - base))
    return AblationReport(rows)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _row_values(row, columns) -> list:
    return [getattr(row, c) for c in columns]


def write_table_csv(rows, columns: Sequence[str], path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"# schema_version={SCHEMA_VERSION}"])
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(v) for v in _row_values(r, columns)])


def read_table_csv(path) -> tuple[int, list[dict[str, str]]]:
    with Path(path).open(newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# schema_version="):
            raise ValueError(f"{path}: missing schema_version header")
        return int(first.split("=", 1)[1]), list(csv.DictReader(fh))


def write_json(payload: dict, path) -> None:
    doc = {"schema_version": SCHEMA_VERSION, **payload}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _rows_json(rows, columns) -> list[dict]:
    return [dict(zip(columns, _row_values(r, columns))) for r in rows]


def write_disparity(report: DisparityReport, stem) -> None:
    write_table_csv(report.rows, DISPARITY_COLUMNS, f"{stem}.csv")
    write_json({"table": "demographic_report", "n_samples": report.n_samples, "n_htl": report.n_htl,
                "rows": _rows_json(report.rows, DISPARITY_COLUMNS)}, f"{stem}.json")


def write_drop_summary(rows: list[DropSummaryRow], stem) -> None:
    write_table_csv(rows, DROP_SUMMARY_COLUMNS, f"{stem}.csv")
    write_json({"table": "drop_summary", "rows": _rows_json(rows, DROP_SUMMARY_COLUMNS)}, f"{stem}.json")


def write_comparison(rows: list[ComparisonRow], stem) -> None:
    write_table_csv(rows, COMPARISON_COLUMNS, f"{stem}.csv")
    write_json({"table": "comparison_table", "rows": _rows_json(rows, COMPARISON_COLUMNS)}, f"{stem}.json")


def write_ablation(report: AblationReport, stem) -> None:
    write_table_csv(report.rows, ABLATION_COLUMNS, f"{stem}.csv")
    write_json({"table": "ablation", "rows": _rows_json(report.rows, ABLATION_COLUMNS)}, f"{stem}.json")


def seg_metrics_dict(m: SegMetrics) -> dict:
    return asdict(m)
