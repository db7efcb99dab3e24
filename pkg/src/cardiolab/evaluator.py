"""AUROC metrics, empirical bootstrap intervals and the result tables."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .cohort import MISSING
from .errors import DegenerateClasses, TooFewValidReplicates

N_BOOTSTRAP = 1000
CI_LEVEL = 0.95
MIN_VALID_REPLICATES = 100
REPORT_MIN_LOWER = 0.70
HORIZON_MINUTES = {1800: 30, 3600: 60, 7200: 120}


def auroc(scores, targets) -> float:
    """Mann-Whitney AUROC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    pos = targets == 1
    n_pos = int(pos.sum())
    n_neg = int(targets.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClasses(f"need both classes, got {n_pos} positive / {n_neg} negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _observed(scores, targets, k):
    m = targets[:, k] != MISSING
    return scores[m, k], targets[m, k]


def macro_auroc(scores, targets, label_ids: Sequence[str]) -> float:
    """Unweighted mean of per-label AUROC, each over that label's observed rows."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    vals = []
    for k, lid in enumerate(label_ids):
        s, t = _observed(scores, targets, k)
        try:
            vals.append(auroc(s, t))
        except DegenerateClasses as exc:
            raise DegenerateClasses(f"label {lid!r}: {exc}", lid) from None
    return float(np.mean(vals))


def replicate_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, r]))


def _replicate(scores, targets, seed, r):
    n, K = targets.shape
    idx = replicate_rng(seed, r).integers(0, n, size=n)
    s, t = scores[idx], targets[idx]
    out = np.full(K, np.nan)
    for k in range(K):
        m = t[:, k] != MISSING
        tk = t[m, k]
        n_pos = int((tk == 1).sum())
        if 0 < n_pos < tk.size:
            out[k] = auroc(s[m, k], tk)
    return out


@dataclass
class BootstrapResult:
    per_label: np.ndarray  # (K, 2) lo/hi
    macro: tuple[float, float]
    n_valid: np.ndarray  # (K,)
    replicates: np.ndarray = field(repr=False)  # (n_iter, K), NaN where degenerate


def bootstrap_ci(
    scores,
    targets,
    label_ids: Sequence[str],
    n_iter: int = N_BOOTSTRAP,
    level: float = CI_LEVEL,
    seed: int = 0,
    workers: int = 1,
) -> BootstrapResult:
    """Row-resampling bootstrap; replicate r draws from its own stream seeded by (seed, r)."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if targets.shape[0] < 2:
        raise ValueError("bootstrap needs at least 2 rows")
    if workers <= 1:
        reps = [_replicate(scores, targets, seed, r) for r in range(n_iter)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reps = list(pool.map(lambda r: _replicate(scores, targets, seed, r), range(n_iter)))
    reps = np.array(reps).reshape(n_iter, len(label_ids))
    q = [100 * (1 - level) / 2, 100 * (1 + level) / 2]
    valid = ~np.isnan(reps)
    n_valid = valid.sum(axis=0)
    per_label = np.empty((len(label_ids), 2))
    for k, lid in enumerate(label_ids):
        if n_valid[k] < MIN_VALID_REPLICATES:
            raise TooFewValidReplicates(lid, int(n_valid[k]))
        per_label[k] = np.percentile(reps[valid[:, k], k], q)
    any_valid = valid.any(axis=1)
    macro_reps = np.array([reps[i, valid[i]].mean() for i in np.flatnonzero(any_valid)])
    if macro_reps.size < MIN_VALID_REPLICATES:
        raise TooFewValidReplicates("<macro>", int(macro_reps.size))
    lo, hi = np.percentile(macro_reps, q)
    return BootstrapResult(per_label, (float(lo), float(hi)), n_valid, reps)


def evaluate(
    scores,
    targets,
    labels: Sequence[Mapping],
    n_iter: int = N_BOOTSTRAP,
    level: float = CI_LEVEL,
    seed: int = 0,
    workers: int = 1,
) -> dict:
    """Full metrics document: per-label and macro AUROC with bootstrap intervals."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    ids = [l["label_id"] for l in labels]
    boot = bootstrap_ci(scores, targets, ids, n_iter, level, seed, workers)
    rows = []
    for k, lab in enumerate(labels):
        s, t = _observed(scores, targets, k)
        rows.append(
            {
                **{key: lab[key] for key in ("label_id", "item_id", "display_name", "direction", "threshold", "unit", "category")},
                "auroc": auroc(s, t),
                "ci_lo": float(boot.per_label[k, 0]),
                "ci_hi": float(boot.per_label[k, 1]),
                "n_pos": int((t == 1).sum()),
                "n_neg": int((t == 0).sum()),
                "n_valid_replicates": int(boot.n_valid[k]),
            }
        )
    return {
        "labels": rows,
        "macro": {
            "auroc": macro_auroc(scores, targets, ids),
            "ci_lo": boot.macro[0],
            "ci_hi": boot.macro[1],
        },
        "config": {"n_bootstrap": n_iter, "ci_level": level, "seed": seed},
    }


# ---------------------------------------------------------------------------
# report tables
# ---------------------------------------------------------------------------

def format_cell(point: float, lo: float, hi: float) -> str:
    return f"{point:.3f} ({lo:.3f}, {hi:.3f})"


def format_threshold(direction: str, threshold: float, unit: str) -> str:
    sym = "≤" if direction == "LOW" else "≥"
    return f"{sym}{threshold:g} {unit}".rstrip()


def format_name(label: Mapping) -> str:
    return f"{label['display_name']} [{label['category']}.]"


@dataclass
class Report:
    mode: str
    header: list[str]
    rows: list[list[str]]
    label_ids: list[str]
    sort_keys: list[float]

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(self.header) + " |", "|" + "|".join("---" for _ in self.header) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label_id"] + self.header)
        for lid, r in zip(self.label_ids, self.rows):
            w.writerow([lid] + [c.replace("**", "") for c in r])
        return buf.getvalue()


def make_report(metrics, mode: str = "ESTIMATION", horizons: Sequence[int] = (1800, 3600, 7200)) -> Report:
    """Rows whose interval lower bound is strictly above 0.70, best first.

    Estimation takes one metrics document and sorts by point AUROC.  Monitoring
    takes a mapping horizon_s -> metrics document, keeps a label when any
    horizon clears the bound, sorts by mean point AUROC over the horizons and
    bolds the best horizon per row.
    """
    if mode == "ESTIMATION":
        labels = [l for l in metrics["labels"] if l["ci_lo"] > REPORT_MIN_LOWER]
        labels.sort(key=lambda l: (-l["auroc"], l["label_id"]))
        return Report(
            mode,
            ["Value", "Threshold", "Estimation AUROC"],
            [[format_name(l), format_threshold(l["direction"], l["threshold"], l["unit"]), format_cell(l["auroc"], l["ci_lo"], l["ci_hi"])] for l in labels],
            [l["label_id"] for l in labels],
            [l["auroc"] for l in labels],
        )
    if mode != "MONITORING":
        raise ValueError(f"unknown mode {mode!r}")
    missing = [h for h in horizons if h not in metrics]
    if missing:
        raise ValueError(f"metrics missing for horizon(s) {missing}")
    by_label: dict[str, dict[int, Mapping]] = {}
    meta: dict[str, Mapping] = {}
    for h in horizons:
        for l in metrics[h]["labels"]:
            by_label.setdefault(l["label_id"], {})[h] = l
            meta.setdefault(l["label_id"], l)
    entries = []
    for lid, cells in by_label.items():
        if not any(c["ci_lo"] > REPORT_MIN_LOWER for c in cells.values()):
            continue
        mean = float(np.mean([c["auroc"] for c in cells.values()]))
        entries.append((lid, cells, mean))
    entries.sort(key=lambda e: (-e[2], e[0]))
    rows = []
    for lid, cells, _ in entries:
        best = max(cells, key=lambda h: (cells[h]["auroc"], -h))
        row = [format_name(meta[lid]), format_threshold(meta[lid]["direction"], meta[lid]["threshold"], meta[lid]["unit"])]
        for h in horizons:
            if h not in cells:
                row.append("n/a")
                continue
            text = format_cell(cells[h]["auroc"], cells[h]["ci_lo"], cells[h]["ci_hi"])
            row.append(f"**{text}**" if h == best else text)
        rows.append(row)
    header = ["Value", "Threshold"] + [f"{HORIZON_MINUTES.get(h, h // 60)} min. AUROC" for h in horizons]
    return Report(mode, header, rows, [e[0] for e in entries], [e[2] for e in entries])


def filter_metrics(metrics: Mapping, keep: Sequence[str]) -> dict:
    out = dict(metrics)
    out["labels"] = [l for l in metrics["labels"] if l["label_id"] in set(keep)]
    return out
