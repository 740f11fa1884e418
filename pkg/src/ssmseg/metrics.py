"""Overlap scoring and result tabulation.

Jaccard/Dice in percent over binary volumes, with a regional breakdown that
splits the ground truth's extent along one axis into three equal bands
(apex = low end by default).  Tables aggregate repeated case ids the way the
per-patient rows of a leave-one-out study aggregate that patient's volumes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError
from .geometry import Volume3D


@dataclass(frozen=True)
class RegionalScore:
    overall: float
    apex: float
    midgland: float
    base: float

    def __post_init__(self) -> None:
        for name in ("overall", "apex", "midgland", "base"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise InvalidArgumentError(f"{name} score {v} outside [0, 100]")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.overall, self.apex, self.midgland, self.base)


def _check_same_grid(a: Volume3D, b: Volume3D) -> None:
    if a.dims != b.dims or a.spacing != b.spacing or a.origin != b.origin:
        raise InvalidArgumentError("masks live on different grids")


def _counts(a: np.ndarray, b: np.ndarray) -> tuple[int, int, int]:
    inter = int(np.logical_and(a, b).sum())
    return inter, int(a.sum()), int(b.sum())


def jaccard(a: Volume3D, b: Volume3D) -> float:
    """Intersection over union, percent; 100 when both masks are empty."""
    _check_same_grid(a, b)
    inter, na, nb = _counts(a.as_bool(), b.as_bool())
    union = na + nb - inter
    return 100.0 if union == 0 else 100.0 * inter / union


def dice(a: Volume3D, b: Volume3D) -> float:
    """2|a^b| / (|a|+|b|), percent; 100 when both masks are empty."""
    _check_same_grid(a, b)
    inter, na, nb = _counts(a.as_bool(), b.as_bool())
    return 100.0 if na + nb == 0 else 200.0 * inter / (na + nb)


def region_bands(truth: np.ndarray, axis: int) -> tuple[slice, slice, slice]:
    """Three contiguous index bands splitting the truth extent along ``axis``."""
    other = tuple(i for i in range(3) if i != axis)
    occupied = np.nonzero(truth.any(axis=other))[0]
    if occupied.size == 0:
        raise DegenerateInputError("ground-truth mask is empty")
    lo, hi = int(occupied.min()), int(occupied.max()) + 1
    edges = np.linspace(lo, hi, 4).round().astype(int)
    return slice(edges[0], edges[1]), slice(edges[1], edges[2]), slice(edges[2], edges[3])


def regional_jaccard(
    pred: Volume3D, truth: Volume3D, axis: int = 2, apex_low: bool = True
) -> RegionalScore:
    """Overall plus per-band Jaccard along ``axis`` (apex/mid-gland/base).

    Bands are thirds of the ground truth's occupied extent; voxels outside
    that extent contribute to the overall score only.  ``apex_low`` places
    the apex at the low-index end.
    """
    if axis not in (0, 1, 2):
        raise InvalidArgumentError("axis must be 0, 1, or 2")
    _check_same_grid(pred, truth)
    a = pred.as_bool()
    b = truth.as_bool()
    low, mid, high = region_bands(b, axis)

    def band_jsc(sl: slice) -> float:
        index = [slice(None)] * 3
        index[axis] = sl
        inter, na, nb = _counts(a[tuple(index)], b[tuple(index)])
        union = na + nb - inter
        return 100.0 if union == 0 else 100.0 * inter / union

    inter, na, nb = _counts(a, b)
    union = na + nb - inter
    overall = 100.0 if union == 0 else 100.0 * inter / union
    first, last = band_jsc(low), band_jsc(high)
    apex, base = (first, last) if apex_low else (last, first)
    return RegionalScore(overall=overall, apex=apex, midgland=band_jsc(mid), base=base)


@dataclass(frozen=True)
class SummaryRow:
    label: str
    n: int
    mean: RegionalScore
    std: RegionalScore


_FIELDS = ("overall", "apex", "midgland", "base")


def _mean_std(scores: list[RegionalScore]) -> tuple[RegionalScore, RegionalScore]:
    arr = np.array([s.as_tuple() for s in scores])
    mean = arr.mean(axis=0)
    std = arr.std(axis=0)  # population convention
    return RegionalScore(*mean), RegionalScore(*std)


def tabulate(results: list[tuple[str, RegionalScore]]) -> list[SummaryRow]:
    """Per-case mean +- std rows plus `total` (all volumes) and, when any case
    holds several volumes, `total_by_case` (mean of the per-case means)."""
    if not results:
        raise InvalidArgumentError("no results to tabulate")
    by_case: dict[str, list[RegionalScore]] = {}
    for case_id, score in results:
        by_case.setdefault(str(case_id), []).append(score)

    rows = []
    case_means = []
    for case_id in sorted(by_case):
        mean, std = _mean_std(by_case[case_id])
        rows.append(SummaryRow(case_id, len(by_case[case_id]), mean, std))
        case_means.append(mean)
    all_scores = [s for _, s in results]
    mean, std = _mean_std(all_scores)
    rows.append(SummaryRow("total", len(all_scores), mean, std))
    if any(len(v) > 1 for v in by_case.values()):
        mean, std = _mean_std(case_means)
        rows.append(SummaryRow("total_by_case", len(case_means), mean, std))
    return rows


def render_csv(rows: list[SummaryRow]) -> str:
    buf = io.StringIO()
    heads = ",".join(f"{f}_mean,{f}_std" for f in _FIELDS)
    buf.write(f"case_id,n,{heads}\n")
    for r in rows:
        cells = []
        for f in _FIELDS:
            cells.append(f"{getattr(r.mean, f):.2f}")
            cells.append(f"{getattr(r.std, f):.2f}")
        buf.write(f"{r.label},{r.n}," + ",".join(cells) + "\n")
    return buf.getvalue()


def render_text(rows: list[SummaryRow]) -> str:
    header = f"{'case':<16}{'n':>4}  " + "  ".join(f"{f:>16}" for f in _FIELDS)
    lines = [header, "-" * len(header)]
    for r in rows:
        cells = "  ".join(
            f"{getattr(r.mean, f):7.2f} +-{getattr(r.std, f):6.2f}" for f in _FIELDS
        )
        lines.append(f"{r.label:<16}{r.n:>4}  {cells}")
    return "\n".join(lines) + "\n"


def scores_csv(results: list[tuple[str, RegionalScore]]) -> str:
    """Per-volume rows: ``case_id,overall,apex,midgland,base``."""
    buf = io.StringIO()
    buf.write("case_id,overall,apex,midgland,base\n")
    for case_id, s in results:
        buf.write(
            f"{case_id},{s.overall:.4f},{s.apex:.4f},{s.midgland:.4f},{s.base:.4f}\n"
        )
    return buf.getvalue()
