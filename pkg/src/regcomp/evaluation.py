"""Pixel-level accuracy of dependency maps against unfamiliarity masks."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

RATES = ("overall", "tpr", "tnr", "ppv", "npv")


@dataclass(frozen=True)
class PixelConfusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def rates(self) -> dict:
        """Percentages; None where the denominator is zero."""
        def ratio(a, b):
            return 100.0 * a / b if b else None
        return {"overall": ratio(self.tp + self.tn, self.total),
                "tpr": ratio(self.tp, self.tp + self.fn),
                "tnr": ratio(self.tn, self.tn + self.fp),
                "ppv": ratio(self.tp, self.tp + self.fp),
                "npv": ratio(self.tn, self.tn + self.fn)}


@dataclass
class MetricsRow:
    method: str
    time: float
    overall: float
    tpr: float
    tnr: float
    ppv: float
    npv: float
    threshold: float
    n_images: int
    excluded: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def rate(self, name: str) -> float:
        return getattr(self, name)


def binarize_map(normalized: np.ndarray, threshold: float) -> np.ndarray:
    """Pixels whose normalised score is strictly above ``threshold`` are positive."""
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    normalized = getattr(normalized, "normalized", normalized)
    return np.asarray(normalized) > threshold


def confusion(pred: np.ndarray, truth: np.ndarray) -> PixelConfusion:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return PixelConfusion(tp, fp, pred.size - tp - fp - fn, fn)


def aggregate(confusions, method: str = "", time: float = float("nan"),
              threshold: float = float("nan")) -> MetricsRow:
    """Per-image rates, then the mean over images where each rate is defined."""
    confusions = list(confusions)
    if not confusions:
        raise ValueError("no confusions to aggregate")
    per_image = [c.rates() for c in confusions]
    means, excluded = {}, {}
    for name in RATES:
        vals = [r[name] for r in per_image if r[name] is not None]
        excluded[name] = len(per_image) - len(vals)
        means[name] = float(np.mean(vals)) if vals else float("nan")
    return MetricsRow(method, time, threshold=threshold, n_images=len(confusions),
                      excluded=excluded, **means)


def balanced_accuracy(maps, truths, threshold: float) -> float:
    vals = []
    for m, t in zip(maps, truths):
        r = confusion(binarize_map(m, threshold), t).rates()
        # an image without positives (or negatives) counts its defined half only
        halves = [v for v in (r["tpr"], r["tnr"]) if v is not None]
        vals.append(np.mean(halves))
    return float(np.mean(vals))


def select_threshold(maps, truths, grid: int = 101) -> float:
    """Threshold in {0, 0.01, ..., 1} maximising mean balanced accuracy; ties go low."""
    maps = [getattr(m, "normalized", m) for m in maps]
    truths = list(truths)
    if not maps or len(maps) != len(truths):
        raise ValueError("need equally many maps and truth masks, at least one")
    best_t, best = 0.0, -np.inf
    for i in range(grid):
        t = i / (grid - 1)
        score = balanced_accuracy(maps, truths, t)
        if score > best + 1e-12:
            best_t, best = t, score
    return best_t


def evaluate_maps(method: str, maps, truths, threshold: float, seconds=None) -> MetricsRow:
    confs = [confusion(binarize_map(m, threshold), t) for m, t in zip(maps, truths)]
    if seconds is None:
        seconds = [getattr(m, "seconds", float("nan")) for m in maps]
    return aggregate(confs, method, float(np.mean(seconds)), threshold)


# ---------------------------------------------------------------- reports

_HEADER = ("Method", "Avg Time (s)", "Overall", "TPR", "TNR", "PPV", "NPV")
CSV_FIELDS = ("method", "time", "overall", "tpr", "tnr", "ppv", "npv", "threshold", "n_images",
              "excluded_overall", "excluded_tpr", "excluded_tnr", "excluded_ppv", "excluded_npv")


def format_table(rows) -> str:
    """Aligned plain-text table with the columns of a method comparison."""
    body = [(r.method, f"{r.time:.3f}", *(f"{r.rate(n):.2f}" for n in RATES)) for r in rows]
    widths = [max(len(x) for x in col) for col in zip(_HEADER, *body)]
    def line(cells):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    sep = "-" * len(line(_HEADER))
    return "\n".join([line(_HEADER), sep, *(line(b) for b in body)]) + "\n"


def to_csv(rows, include_time: bool = True) -> str:
    """Machine-readable report. ``include_time=False`` blanks the timing column."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([r.method, f"{r.time:.6f}" if include_time else "",
                    *(f"{r.rate(n):.6f}" for n in RATES), f"{r.threshold:.2f}", r.n_images,
                    *(r.excluded.get(n, 0) for n in RATES)])
    return buf.getvalue()
