"""The nine retrieval measures plus the Dice diagnostic.

Distances (Euclidean, style loss) are unbounded, so per-query maxima over
the database turn them into scores in [0, 1]:

    ES = 1 - ED / ED_max          SS = 1 - LS / LS_max

Cosine similarity is shifted from [-1, 1] to [0, 1]:

    CS_new = (CS + 1) / 2

Dice already lives in [0, 1]. Fused measures take the harmonic mean of two
or three component scores (the F1-score construction), so the fusion is
high only when every component is high.

Everything here is a pure, stateless function over scalars/arrays;
accumulation is float64 throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DimMismatch,
    DegenerateRange,
    MissingComponent,
    OutOfRange,
    ShapeMismatch,
    WeightCountMismatch,
)
from .records import Measure

#: Component scores entering each harmonic fusion.
I1_COMPONENTS: dict[Measure, tuple[str, ...]] = {
    Measure.I1_ED: ("es", "dc"),
    Measure.I1_CD: ("cs_new", "dc"),
    Measure.I1_ECD: ("es", "cs_new", "dc"),
    Measure.I1_SE: ("es", "ss"),
    Measure.I1_SC: ("ss", "cs_new"),
    Measure.I1_SD: ("ss", "dc"),
}


@dataclass(frozen=True)
class QueryNormalizers:
    """Per-query maxima over the database: ED_max and LS_max.

    Query-dependent by construction; a normalizer of 0 marks the degenerate
    all-identical database (every candidate then scores 1).
    """

    ed_max: float = 0.0
    ls_max: float = 0.0

    def __post_init__(self):
        for name, v in (("ed_max", self.ed_max), ("ls_max", self.ls_max)):
            if not math.isfinite(v) or v < 0.0:
                raise OutOfRange(f"{name} must be finite and >= 0, got {v!r}")


@dataclass(frozen=True)
class ScoreBreakdown:
    """Raw metrics and component scores behind one ranked hit.

    Only the fields the requested measure touches are populated; score-type
    fields (es, cs_new, ss, dc, i1) lie in [0, 1], ed and ls are raw
    non-negative distances/losses.
    """

    ed: float | None = None
    es: float | None = None
    cs: float | None = None
    cs_new: float | None = None
    ls: float | None = None
    ss: float | None = None
    dc: float | None = None
    i1: float | None = None


def euclidean_distance(x, y) -> float:
    """Euclidean distance between two feature vectors (float64 accumulation)."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape or xv.ndim != 1:
        raise DimMismatch(f"feature dims differ: {xv.shape} vs {yv.shape}")
    d = xv - yv
    return float(math.sqrt(float((d * d).sum())))


def euclidean_score(ed: float, ed_max: float) -> float:
    """ES = 1 - ED/ED_max; defined as 1.0 when ED_max is 0 (degenerate database)."""
    return _max_normalized_score(ed, ed_max, "ed")


def cosine_similarity(x, y) -> float:
    """CS = x.y / (|x| |y|), clamped into [-1, 1] against rounding overshoot."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape or xv.ndim != 1:
        raise DimMismatch(f"feature dims differ: {xv.shape} vs {yv.shape}")
    denom = float(np.linalg.norm(xv)) * float(np.linalg.norm(yv))
    if denom == 0.0:
        raise OutOfRange("cosine similarity undefined for a zero-norm vector")
    cs = float((xv * yv).sum()) / denom
    return min(1.0, max(-1.0, cs))


def shift_cosine(cs: float) -> float:
    """Map CS from [-1, 1] to [0, 1]: (CS + 1) / 2."""
    if not math.isfinite(cs) or cs < -1.0 or cs > 1.0:
        raise OutOfRange(f"cosine similarity must lie in [-1, 1], got {cs!r}")
    return (cs + 1.0) / 2.0


def convert_range(
    v: float, old_min: float, old_max: float, new_min: float, new_max: float
) -> float:
    """Affine map of v from [old_min, old_max] onto [new_min, new_max].

    With (-1, 1, 0, 1) this reproduces :func:`shift_cosine` exactly.
    """
    if old_min >= old_max:
        raise DegenerateRange(f"old range [{old_min!r}, {old_max!r}] is empty or reversed")
    if not math.isfinite(v) or v < old_min or v > old_max:
        raise OutOfRange(f"value {v!r} outside source range [{old_min!r}, {old_max!r}]")
    return (v - old_min) * (new_max - new_min) / (old_max - old_min) + new_min


def style_loss(gx: Sequence, gy: Sequence, layer_weights: Sequence[float]) -> float:
    """LS = sum_l w_l^2 * sum_ij (Gx[l]_ij - Gy[l]_ij)^2.

    The per-layer weight sits inside the squared difference, so it enters
    squared. Symmetric in (gx, gy); float64 accumulation.
    """
    if len(gx) != len(gy):
        raise ShapeMismatch(f"gram sets have {len(gx)} vs {len(gy)} layers")
    if len(layer_weights) != len(gx):
        raise WeightCountMismatch(
            f"{len(layer_weights)} layer weights for {len(gx)} gram layers"
        )
    total = 0.0
    for l, (ga, gb) in enumerate(zip(gx, gy)):
        a = np.asarray(ga, dtype=np.float64)
        b = np.asarray(gb, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeMismatch(f"gram layer {l} shapes differ: {a.shape} vs {b.shape}")
        w = float(layer_weights[l])
        d = a - b
        total += (w * w) * float((d * d).sum())
    return total


def style_score(ls: float, ls_max: float) -> float:
    """SS = 1 - LS/LS_max; defined as 1.0 when LS_max is 0 (degenerate database)."""
    return _max_normalized_score(ls, ls_max, "ls")


def dice(x, y) -> float:
    """Dice coefficient 2|X n Y| / (|X| + |Y|) over binary masks.

    Two empty masks count as maximally similar (1.0); exactly one empty
    mask gives 0. Symmetric.
    """
    xm = np.asarray(x)
    ym = np.asarray(y)
    if xm.shape != ym.shape or xm.ndim != 2:
        raise DimMismatch(f"mask dims differ: {xm.shape} vs {ym.shape}")
    nx = int(np.count_nonzero(xm))
    ny = int(np.count_nonzero(ym))
    if nx + ny == 0:
        return 1.0
    inter = int(np.count_nonzero(np.logical_and(xm, ym)))
    return 2.0 * inter / (nx + ny)


def harmonic_fuse(scores: Sequence[float]) -> float:
    """Harmonic mean of scores in [0, 1]; exactly 0 if any score is 0.

    The zero case is the continuous limit (keeps rankings total instead of
    erroring). The result never exceeds min(scores); the final clamp guards
    the 1-ulp overshoot bare float division can produce.
    """
    if len(scores) < 1:
        raise OutOfRange("harmonic_fuse needs at least one score")
    lo = 1.0
    for s in scores:
        s = float(s)
        if not math.isfinite(s) or s < 0.0 or s > 1.0:
            raise OutOfRange(f"score {s!r} outside [0, 1]")
        lo = min(lo, s)
    if lo == 0.0:
        return 0.0
    fused = len(scores) / sum(1.0 / float(s) for s in scores)
    return min(fused, lo)


def i1_score(
    measure: Measure,
    es: float | None = None,
    cs_new: float | None = None,
    ss: float | None = None,
    dc: float | None = None,
) -> float:
    """Harmonic fusion over exactly the components the measure names.

    i1-ed: (ES, DC)   i1-cd: (CS_new, DC)   i1-ecd: (ES, CS_new, DC)
    i1-se: (ES, SS)   i1-sc: (SS, CS_new)   i1-sd: (SS, DC)
    """
    if measure not in I1_COMPONENTS:
        raise MissingComponent(f"{measure} is not a fused measure")
    available = {"es": es, "cs_new": cs_new, "ss": ss, "dc": dc}
    parts = []
    for name in I1_COMPONENTS[measure]:
        value = available[name]
        if value is None:
            raise MissingComponent(f"{measure} requires component {name!r}")
        parts.append(value)
    return harmonic_fuse(parts)


def _max_normalized_score(value: float, max_value: float, name: str) -> float:
    if not math.isfinite(value) or value < 0.0:
        raise OutOfRange(f"{name} must be finite and >= 0, got {value!r}")
    if not math.isfinite(max_value) or max_value < 0.0:
        raise OutOfRange(f"{name}_max must be finite and >= 0, got {max_value!r}")
    if max_value == 0.0:
        return 1.0
    if value > max_value:
        raise OutOfRange(f"{name} = {value!r} exceeds {name}_max = {max_value!r}")
    return 1.0 - value / max_value
