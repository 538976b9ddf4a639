"""Evaluation suite: per-dataset, per-category and micro-averaged metrics with
percentile-bootstrap CIs, paired AUROC comparisons (DeLong and bootstrap), and
histogram export."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from . import kernels
from .errors import ArgumentError
from .features import atomic_write_text
from .metrics import FPR_CONVENTIONS, METRIC_NAMES, _as_scores, _check_tpr, group_scores, ood_metrics

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
METRIC_LABELS = {"fpr": "FPR@95", "auroc": "AUROC", "aupr_in": "AUPR_IN", "aupr_out": "AUPR_OUT"}
_MAX_REDRAWS = 100
_CHUNK = 64


@dataclass(frozen=True, eq=False)
class ScoredDataset:
    scores: np.ndarray
    role: str
    name: str
    category: str = ""

    def __post_init__(self):
        if self.role not in ("id", "ood"):
            raise ArgumentError(f"role must be 'id' or 'ood', got {self.role!r}")
        object.__setattr__(self, "scores", _as_scores(self.scores, self.name or self.role))


def _roles_mask(roles) -> np.ndarray:
    roles = np.asarray(roles)
    if roles.dtype == bool:
        return roles
    if roles.dtype.kind in "US":
        bad = set(np.unique(roles)) - {"id", "ood"}
        if bad:
            raise ArgumentError(f"roles must be 'id' or 'ood', got {sorted(bad)}")
        return roles == "id"
    return roles.astype(np.int64) == 1


# --------------------------------------------------------------------------- #
# bootstrap
# --------------------------------------------------------------------------- #


def _replicate_indices(seed: int, start: int, stop: int, n_id: int, n_ood: int):
    """Stratified resampling; replicate r always uses the stream seeded by (seed, r)."""
    id_idx = np.empty((stop - start, n_id), dtype=np.int64)
    ood_idx = np.empty((stop - start, n_ood), dtype=np.int64)
    for j, r in enumerate(range(start, stop)):
        rng = np.random.default_rng([seed, r])
        id_idx[j] = rng.integers(0, n_id, n_id)
        ood_idx[j] = rng.integers(0, n_ood, n_ood)
    return id_idx, ood_idx


def _redraw(seed: int, r: int, attempt: int, n_id: int, n_ood: int):
    rng = np.random.default_rng([seed, r, attempt])
    return rng.integers(0, n_id, (1, n_id)), rng.integers(0, n_ood, (1, n_ood))


def _bootstrap_table(groupings, n_boot, seed, tpr_target, ood_positive):
    """Replicate metrics for one or more scorers sharing the same resampled indices.

    ``groupings`` is a list of (id_group, ood_group, n_groups); returns a list of
    (kept_replicates x 4) arrays, one per scorer, with identical rows dropped for all.
    """
    n_id = groupings[0][0].size
    n_ood = groupings[0][1].size
    tables = [np.empty((n_boot, 4)) for _ in groupings]
    keep = np.ones(n_boot, dtype=bool)
    for start in range(0, n_boot, _CHUNK):
        stop = min(start + _CHUNK, n_boot)
        id_idx, ood_idx = _replicate_indices(seed, start, stop, n_id, n_ood)
        for table, (ig, og, ng) in zip(tables, groupings):
            table[start:stop] = kernels.bootstrap_metrics(ig, og, ng, id_idx, ood_idx, tpr_target, ood_positive)
    for r in np.flatnonzero(~np.all([np.isfinite(t).all(axis=1) for t in tables], axis=0)):
        for attempt in range(1, _MAX_REDRAWS + 1):
            id_idx, ood_idx = _redraw(seed, r, attempt, n_id, n_ood)
            rows = [kernels.bootstrap_metrics(ig, og, ng, id_idx, ood_idx, tpr_target, ood_positive)[0]
                    for ig, og, ng in groupings]
            if all(np.isfinite(row).all() for row in rows):
                for t, row in zip(tables, rows):
                    t[r] = row
                break
        else:
            log.warning("bootstrap replicate %d degenerate after %d redraws; dropped", r, _MAX_REDRAWS)
            keep[r] = False
    return [t[keep] for t in tables]


def bootstrap_replicates(id_scores, ood_scores, n_boot: int = 1000, seed: int = 0, tpr_target: float = 0.95,
                         fpr_convention: str = "ood-positive") -> dict[str, np.ndarray]:
    if n_boot < 2:
        raise ArgumentError("n_boot must be >= 2")
    _check_tpr(tpr_target)
    (table,) = _bootstrap_table([group_scores(id_scores, ood_scores)], n_boot, seed, tpr_target,
                                fpr_convention == "ood-positive")
    return {m: table[:, i] for i, m in enumerate(METRIC_NAMES)}


def bootstrap_ci(id_scores, ood_scores, metric: str | Sequence[str] = "auroc", n_boot: int = 1000, seed: int = 0,
                 tpr_target: float = 0.95, fpr_convention: str = "ood-positive", level: float = 0.95):
    """Percentile-bootstrap CI (stratified resampling of ID and OOD separately).

    Returns ``(lo, hi)`` for a single metric name, or a dict of them for a list.
    """
    reps = bootstrap_replicates(id_scores, ood_scores, n_boot, seed, tpr_target, fpr_convention)
    q = [100 * (1 - level) / 2, 100 * (1 + level) / 2]
    names = [metric] if isinstance(metric, str) else list(metric)
    bad = [m for m in names if m not in METRIC_NAMES]
    if bad:
        raise ArgumentError(f"unknown metric(s) {bad}; choose from {METRIC_NAMES}")
    out = {m: tuple(float(v) for v in np.percentile(reps[m], q)) for m in names}
    return out[metric] if isinstance(metric, str) else out


def _split_paired(scores_a, scores_b, roles):
    a = np.asarray(scores_a, dtype=np.float64).ravel()
    b = np.asarray(scores_b, dtype=np.float64).ravel()
    is_id = _roles_mask(roles).ravel()
    if not (a.size == b.size == is_id.size):
        raise ArgumentError(f"paired inputs differ in length: {a.size}, {b.size}, roles {is_id.size}")
    if is_id.sum() < 2 or (~is_id).sum() < 2:
        raise ArgumentError("need at least 2 ID and 2 OOD samples")
    return a[is_id], a[~is_id], b[is_id], b[~is_id]


def bootstrap_compare(scores_a, scores_b, roles, n_boot: int = 1000, seed: int = 0) -> float:
    """Two-sided paired-bootstrap p-value for AUROC(a) - AUROC(b)."""
    if n_boot < 2:
        raise ArgumentError("n_boot must be >= 2")
    a_id, a_ood, b_id, b_ood = _split_paired(scores_a, scores_b, roles)
    ta, tb = _bootstrap_table([group_scores(a_id, a_ood), group_scores(b_id, b_ood)], n_boot, seed, 0.95, True)
    delta = ta[:, 1] - tb[:, 1]
    p = 2.0 * min(np.mean(delta <= 0), np.mean(delta >= 0))
    return float(min(max(p, 1.0 / delta.size), 1.0))


# --------------------------------------------------------------------------- #
# DeLong
# --------------------------------------------------------------------------- #


def _structural_components(x_id: np.ndarray, x_ood: np.ndarray):
    m, n = x_id.size, x_ood.size
    t_all = kernels.midranks(np.concatenate([x_id, x_ood]))
    t_id = kernels.midranks(x_id)
    t_ood = kernels.midranks(x_ood)
    v10 = (t_all[:m] - t_id) / n
    v01 = 1.0 - (t_all[m:] - t_ood) / m
    return v10, v01


def delong_auc_variance(id_scores, ood_scores) -> tuple[float, float]:
    """AUROC and its DeLong variance for a single scorer."""
    x_id, x_ood = _as_scores(id_scores, "ID"), _as_scores(ood_scores, "OOD")
    v10, v01 = _structural_components(x_id, x_ood)
    var = (np.var(v10, ddof=1) if v10.size > 1 else 0.0) / v10.size + (
        np.var(v01, ddof=1) if v01.size > 1 else 0.0) / v01.size
    return float(v10.mean()), float(var)


def delong_test(scores_a, scores_b, roles) -> tuple[float, float]:
    """Paired DeLong test. Returns (AUROC_a - AUROC_b, two-sided p)."""
    a_id, a_ood, b_id, b_ood = _split_paired(scores_a, scores_b, roles)
    va10, va01 = _structural_components(a_id, a_ood)
    vb10, vb01 = _structural_components(b_id, b_ood)
    delta = float(va10.mean() - vb10.mean())
    s10 = np.cov(np.stack([va10, vb10]))
    s01 = np.cov(np.stack([va01, vb01]))
    s = s10 / a_id.size + s01 / a_ood.size
    var = s[0, 0] + s[1, 1] - 2.0 * s[0, 1]
    if not var > 1e-300:
        return delta, 1.0 if delta == 0.0 else 0.0
    return delta, float(min(1.0, 2.0 * norm.sf(abs(delta) / np.sqrt(var))))


# --------------------------------------------------------------------------- #
# suite
# --------------------------------------------------------------------------- #


@dataclass
class MetricRow:
    name: str
    category: str
    n_id: int
    n_ood: int
    values: dict[str, float]
    ci: dict[str, tuple[float, float]] | None = None

    def to_dict(self) -> dict:
        d = {"name": self.name, "category": self.category, "n_id": self.n_id, "n_ood": self.n_ood,
             "metrics": dict(self.values)}
        if self.ci is not None:
            d["ci"] = {k: list(v) for k, v in self.ci.items()}
        return d


@dataclass
class EvalReport:
    datasets: list[MetricRow]
    categories: list[MetricRow]
    micro: MetricRow
    settings: dict = field(default_factory=dict)
    comparisons: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "settings": self.settings,
            "datasets": [r.to_dict() for r in self.datasets],
            "categories": [r.to_dict() for r in self.categories],
            "micro": self.micro.to_dict(),
            "comparisons": self.comparisons,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def render(self) -> str:
        return render_report(self.to_dict())


def _row(name, category, id_scores, ood_scores, n_boot, seed, tpr_target, fpr_convention) -> MetricRow:
    values = ood_metrics(id_scores, ood_scores, tpr_target, fpr_convention)
    ci = None
    if n_boot:
        raw = bootstrap_ci(id_scores, ood_scores, list(METRIC_NAMES), n_boot, seed, tpr_target, fpr_convention)
        # report rows always bracket the point estimate
        ci = {m: (min(lo, values[m]), max(hi, values[m])) for m, (lo, hi) in raw.items()}
    return MetricRow(name, category, int(np.size(id_scores)), int(np.size(ood_scores)), values, ci)


def evaluate_suite(
    id_test: ScoredDataset,
    ood_sets: Sequence[ScoredDataset],
    n_boot: int = 1000,
    seed: int = 0,
    tpr_target: float = 0.95,
    fpr_convention: str = "ood-positive",
    categories: Sequence[str] | None = None,
) -> EvalReport:
    """Metrics of ``id_test`` against every OOD set, category means, and the pooled micro-average.

    ``n_boot=0`` skips confidence intervals. ``categories`` fixes the order of the
    category rows; requested categories without datasets are skipped with a warning.
    """
    if not ood_sets:
        raise ArgumentError("need at least one OOD set")
    if fpr_convention not in FPR_CONVENTIONS:
        raise ArgumentError(f"fpr convention must be one of {FPR_CONVENTIONS}")
    rows = [_row(s.name, s.category, id_test.scores, s.scores, n_boot, seed, tpr_target, fpr_convention)
            for s in ood_sets]

    order = list(categories) if categories is not None else list(dict.fromkeys(s.category for s in ood_sets))
    cat_rows = []
    for cat in order:
        members = [r for r in rows if r.category == cat]
        if not members:
            log.warning("category %r has no datasets; skipped", cat)
            continue
        mean = {m: float(np.mean([r.values[m] for r in members])) for m in METRIC_NAMES}
        cat_rows.append(MetricRow(cat or "uncategorized", cat, id_test.scores.size,
                                  sum(r.n_ood for r in members), mean))

    pooled = np.concatenate([s.scores for s in ood_sets])
    micro = _row("micro", "all", id_test.scores, pooled, n_boot, seed, tpr_target, fpr_convention)
    settings = {"n_boot": n_boot, "seed": seed, "tpr_target": tpr_target, "fpr_convention": fpr_convention,
                "id_dataset": id_test.name}
    return EvalReport(rows, cat_rows, micro, settings)


def compare_record(label_a: str, label_b: str, scope: str, scores_a, scores_b, roles, n_boot: int = 1000,
                   seed: int = 0) -> dict:
    delta, p_delong = delong_test(scores_a, scores_b, roles)
    p_boot = bootstrap_compare(scores_a, scores_b, roles, n_boot, seed)
    a_id, a_ood, b_id, b_ood = _split_paired(scores_a, scores_b, roles)
    ci_a = bootstrap_ci(a_id, a_ood, "auroc", n_boot, seed)
    ci_b = bootstrap_ci(b_id, b_ood, "auroc", n_boot, seed)
    return {
        "scope": scope,
        "method_a": label_a,
        "method_b": label_b,
        "auroc_a": ood_metrics(a_id, a_ood)["auroc"],
        "auroc_b": ood_metrics(b_id, b_ood)["auroc"],
        "auroc_a_ci": list(ci_a),
        "auroc_b_ci": list(ci_b),
        "delta_auc": delta,
        "delong_p": p_delong,
        "bootstrap_p": p_boot,
        "n_boot": n_boot,
    }


# --------------------------------------------------------------------------- #
# rendering
# --------------------------------------------------------------------------- #


def _pct(v: float) -> str:
    return f"{100.0 * v:.2f}"


def _cell(row: dict, m: str) -> str:
    s = _pct(row["metrics"][m])
    if "ci" in row:
        lo, hi = row["ci"][m]
        s += f" ({_pct(lo)}, {_pct(hi)})"
    return s


def render_report(doc: Mapping) -> str:
    """Aligned text table, metrics in percent with two decimals."""
    header = ["Dataset", "Category"] + [METRIC_LABELS[m] for m in METRIC_NAMES]
    body = [[r["name"], r["category"]] + [_cell(r, m) for m in METRIC_NAMES] for r in doc["datasets"]]
    cats = [[r["name"], "Average"] + [_cell(r, m) for m in METRIC_NAMES] for r in doc["categories"]]
    micro = [["micro (pooled OOD)", "all"] + [_cell(doc["micro"], m) for m in METRIC_NAMES]]
    table = [header] + body + cats + micro
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]

    def fmt(r):
        return "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()

    rule = "-" * len(fmt(header))
    lines = [fmt(header), rule, *map(fmt, body)]
    if cats:
        lines += [rule, *map(fmt, cats)]
    lines += [rule, *map(fmt, micro)]
    for c in doc.get("comparisons", []):
        lines.append(
            f"compare [{c['scope']}] {c['method_a']} vs {c['method_b']}: "
            f"AUROC {_pct(c['auroc_a'])} vs {_pct(c['auroc_b'])}, dAUC {100 * c['delta_auc']:+.2f}, "
            f"DeLong p={c['delong_p']:.4g}, bootstrap p={c['bootstrap_p']:.4g}"
        )
    s = doc.get("settings", {})
    if s:
        lines.append(f"(FPR convention: {s.get('fpr_convention')}, n_boot={s.get('n_boot')}, seed={s.get('seed')})")
    return "\n".join(lines) + "\n"


def write_report(out_dir: str | os.PathLike, report: EvalReport, stem: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    js, txt = out_dir / f"{stem}.json", out_dir / f"{stem}.txt"
    atomic_write_text(js, report.to_json())
    atomic_write_text(txt, report.render())
    return js, txt


def auroc_bar_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "category", "auroc"])
    for r in report.datasets:
        w.writerow([r.name, r.category, repr(r.values["auroc"])])
    return buf.getvalue()


# --------------------------------------------------------------------------- #
# histograms
# --------------------------------------------------------------------------- #

_PALETTE = ("#1f77b4", "#ff7f0e", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def histogram_table(groups: Mapping[str, Sequence[float]], bins: int = 50):
    """Shared bin edges over all groups; returns (edges, {name: counts})."""
    if bins < 2:
        raise ArgumentError("bins must be >= 2")
    kept = {}
    for name, values in groups.items():
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            log.warning("histogram group %r is empty; skipped", name)
            continue
        kept[name] = v
    if not kept:
        raise ArgumentError("all histogram groups are empty")
    edges = np.histogram_bin_edges(np.concatenate(list(kept.values())), bins=bins)
    return edges, {name: np.histogram(v, bins=edges)[0] for name, v in kept.items()}


def _svg(edges: np.ndarray, counts: Mapping[str, np.ndarray], title: str) -> str:
    w, h, pad = 640, 400, 50
    widths = np.diff(edges)
    dens = {k: c / (c.sum() * widths) for k, c in counts.items()}
    ymax = max(float(d.max()) for d in dens.values()) or 1.0
    x0, x1 = float(edges[0]), float(edges[-1])

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (w - 2 * pad)

    def py(y):
        return h - pad - y / ymax * (h - 2 * pad)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{h - pad + 18}" font-family="sans-serif" font-size="11">{x0:.4g}</text>',
        f'<text x="{w - pad}" y="{h - pad + 18}" text-anchor="end" font-family="sans-serif" font-size="11">{x1:.4g}</text>',
        f'<text x="{w / 2:.1f}" y="{h - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">score</text>',
    ]
    for i, (name, d) in enumerate(dens.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [(px(edges[0]), py(0.0))]
        for j, v in enumerate(d):
            pts += [(px(edges[j]), py(v)), (px(edges[j + 1]), py(v))]
        pts.append((px(edges[-1]), py(0.0)))
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        out.append(f'<polyline points="{path}" fill="{color}" fill-opacity="0.25" stroke="{color}" stroke-width="1.5"/>')
        ly = pad + 16 * i
        out.append(f'<rect x="{w - pad - 140}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{w - pad - 125}" y="{ly}" font-family="sans-serif" font-size="11">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def histogram_export(groups: Mapping[str, Sequence[float]], bins: int, path: str | os.PathLike,
                     title: str = "log-likelihood") -> tuple[Path, Path]:
    """Write ``<path>.csv`` (edges and counts per group) and ``<path>.svg`` (overlaid densities)."""
    edges, counts = histogram_table(groups, bins)
    base = Path(path)
    if base.suffix in (".csv", ".svg"):
        base = base.with_suffix("")
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["group", "bin", "lo", "hi", "count", "density"])
    for name, c in counts.items():
        dens = c / (c.sum() * np.diff(edges))
        for j in range(len(c)):
            wr.writerow([name, j, repr(float(edges[j])), repr(float(edges[j + 1])), int(c[j]), repr(float(dens[j]))])
    csv_path, svg_path = base.with_suffix(".csv"), base.with_suffix(".svg")
    atomic_write_text(csv_path, buf.getvalue())
    atomic_write_text(svg_path, _svg(edges, counts, title))
    return csv_path, svg_path
