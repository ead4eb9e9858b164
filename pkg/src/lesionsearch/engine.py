"""Exact top-k retrieval over a loaded store.

Every query is a two-pass brute-force scan:

1. compute the raw metrics the measure needs (Euclidean distance, cosine,
   style loss, Dice) against every candidate and fix the per-query maxima
   ED_max / LS_max;
2. turn metrics into scores, rank, and keep the k best.

Ranking is totally ordered: score descending, ties broken by ascending
record id (bytewise), so results are deterministic. Candidate scoring is
row-local (no cross-candidate reductions except the associative maxima),
which makes parallel and serial execution bit-identical; pass `workers`
> 1 to fan the scan out across threads.

All ten measures are reported in "higher = more similar" score form:
euclidean as ES, style as SS, cosine as CS_new, dice as DC, and the fused
measures as their harmonic means. Every reported score lies in [0, 1].
"""

from __future__ import annotations

import threading
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyStore, OutOfRange, WeightCountMismatch
from .gram import GramConfig
from .measures import I1_COMPONENTS, QueryNormalizers, ScoreBreakdown
from .records import Measure, PAPER_MEASURES, RisRecord, validate_record
from .store import Store

#: Raw metrics each measure consumes.
_NEEDS: dict[Measure, tuple[str, ...]] = {
    Measure.EUCLIDEAN: ("ed",),
    Measure.COSINE: ("cs",),
    Measure.STYLE: ("ls",),
    Measure.DICE: ("dc",),
    Measure.I1_ED: ("ed", "dc"),
    Measure.I1_CD: ("cs", "dc"),
    Measure.I1_ECD: ("ed", "cs", "dc"),
    Measure.I1_SE: ("ed", "ls"),
    Measure.I1_SC: ("ls", "cs"),
    Measure.I1_SD: ("ls", "dc"),
}

_LS_ROW_CHUNK = 1024  # bounds float64 temporaries during the style scan


@dataclass(frozen=True)
class QueryParams:
    """What to retrieve: measure, k, self-exclusion, style weights."""

    measure: Measure
    k: int = 5
    exclude_self: bool = False
    layer_weights: tuple[float, ...] | None = None
    include_breakdown: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise OutOfRange(f"k must be >= 1, got {self.k}")
        if self.layer_weights is not None:
            object.__setattr__(
                self, "layer_weights", tuple(float(w) for w in self.layer_weights)
            )


@dataclass(frozen=True)
class RankedHit:
    id: str
    score: float
    breakdown: ScoreBreakdown | None = None


@dataclass(frozen=True)
class QueryResult:
    measure: Measure
    hits: tuple[RankedHit, ...]
    normalizers: QueryNormalizers

    def ids(self) -> tuple[str, ...]:
        return tuple(h.id for h in self.hits)


# --- scan index -------------------------------------------------------------

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


class _ScanIndex:
    """Stacked per-store arrays for vectorized scanning."""

    def __init__(self, records: Sequence[RisRecord]):
        self.ids = np.array([r.id for r in records])
        self.features = np.stack([r.feature for r in records]).astype(np.float64)
        self.feature_norms = np.sqrt((self.features * self.features).sum(axis=1))
        self.gram_flat = np.stack(
            [np.concatenate([g.ravel() for g in r.grams]) for r in records]
        )  # float32 [N, sum(C_l^2)]
        self.gram_sizes = tuple(g.shape[0] * g.shape[0] for g in records[0].grams)
        mask_flat = np.stack([r.mask.ravel() for r in records])
        self.mask_packed = np.packbits(mask_flat, axis=1)
        self.mask_pop = mask_flat.sum(axis=1, dtype=np.int64)


_INDEX_CACHE: "weakref.WeakKeyDictionary[Store, _ScanIndex]" = weakref.WeakKeyDictionary()
_INDEX_LOCK = threading.Lock()


def _scan_index(store: Store) -> _ScanIndex:
    with _INDEX_LOCK:
        index = _INDEX_CACHE.get(store)
        if index is None:
            index = _ScanIndex(store.records)
            _INDEX_CACHE[store] = index
    return index


# --- metric kernels (row-local: values independent of chunk boundaries) -----

def _ed_rows(index: _ScanIndex, q: np.ndarray, rows: slice) -> np.ndarray:
    d = index.features[rows] - q
    np.square(d, out=d)
    return np.sqrt(d.sum(axis=1))


def _cs_rows(index: _ScanIndex, q: np.ndarray, qnorm: float, rows: slice) -> np.ndarray:
    dots = (index.features[rows] * q).sum(axis=1)
    cs = dots / (index.feature_norms[rows] * qnorm)
    return np.clip(cs, -1.0, 1.0)


def _ls_rows(index: _ScanIndex, qg: np.ndarray, w: np.ndarray, rows: slice) -> np.ndarray:
    start, stop = rows.indices(index.gram_flat.shape[0])[:2]
    out = np.empty(stop - start, dtype=np.float64)
    for c0 in range(start, stop, _LS_ROW_CHUNK):
        c1 = min(c0 + _LS_ROW_CHUNK, stop)
        d = index.gram_flat[c0:c1].astype(np.float64)
        d -= qg
        np.square(d, out=d)
        d *= w
        out[c0 - start : c1 - start] = d.sum(axis=1)
    return out


def _dc_rows(
    index: _ScanIndex, q_packed: np.ndarray, q_pop: int, rows: slice
) -> np.ndarray:
    inter = _POPCOUNT[np.bitwise_and(index.mask_packed[rows], q_packed)].sum(
        axis=1, dtype=np.int64
    )
    denom = index.mask_pop[rows] + q_pop
    dc = np.where(denom == 0, 1.0, 2.0 * inter / np.where(denom == 0, 1, denom))
    return dc


def _compute_metrics(
    store: Store,
    index: _ScanIndex,
    query_record: RisRecord,
    needs: set[str],
    layer_weights: tuple[float, ...] | None,
    workers: int,
) -> dict[str, np.ndarray]:
    n = len(store)
    q64 = query_record.feature.astype(np.float64)
    qnorm = float(np.sqrt((q64 * q64).sum()))
    qg = np.concatenate([g.ravel() for g in query_record.grams]).astype(np.float64)
    w = _flat_style_weights(query_record, layer_weights)
    q_flat_mask = query_record.mask.ravel()
    q_packed = np.packbits(q_flat_mask)
    q_pop = int(q_flat_mask.sum(dtype=np.int64))

    kernels = {
        "ed": lambda rows: _ed_rows(index, q64, rows),
        "cs": lambda rows: _cs_rows(index, q64, qnorm, rows),
        "ls": lambda rows: _ls_rows(index, qg, w, rows),
        "dc": lambda rows: _dc_rows(index, q_packed, q_pop, rows),
    }
    wanted = [name for name in ("ed", "cs", "ls", "dc") if name in needs]

    if workers <= 1 or n < 2 * workers:
        return {name: kernels[name](slice(0, n)) for name in wanted}

    bounds = [(i * n) // workers for i in range(workers + 1)]
    chunks = [slice(a, b) for a, b in zip(bounds, bounds[1:]) if b > a]
    out: dict[str, np.ndarray] = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for name in wanted:
            parts = list(pool.map(kernels[name], chunks))
            out[name] = np.concatenate(parts)
    return out


def _flat_style_weights(
    query_record: RisRecord, layer_weights: tuple[float, ...] | None
) -> np.ndarray:
    sizes = [g.shape[0] * g.shape[0] for g in query_record.grams]
    if layer_weights is None:
        layer_weights = (1.0,) * len(sizes)
    if len(layer_weights) != len(sizes):
        raise WeightCountMismatch(
            f"{len(layer_weights)} layer weights for {len(sizes)} gram layers"
        )
    GramConfig(tuple(layer_weights))  # value validation (finite, >= 0, one positive)
    betas = np.asarray(layer_weights, dtype=np.float64)
    return np.repeat(betas * betas, sizes)


# --- scoring ----------------------------------------------------------------

def _vector_harmonic(parts: list[np.ndarray]) -> np.ndarray:
    mn = np.minimum.reduce(parts)
    out = np.zeros_like(mn)
    pos = mn > 0.0
    if pos.any():
        inv = np.zeros(int(pos.sum()), dtype=np.float64)
        for p in parts:
            inv += 1.0 / p[pos]
        fused = len(parts) / inv
        out[pos] = np.minimum(fused, mn[pos])
    return out


def _scores_for(
    measure: Measure, metrics: Mapping[str, np.ndarray], norm: QueryNormalizers
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Score vector plus every component score array the measure touches."""
    comp: dict[str, np.ndarray] = {}
    if "ed" in _NEEDS[measure]:
        ed = metrics["ed"]
        comp["es"] = np.ones_like(ed) if norm.ed_max == 0.0 else 1.0 - ed / norm.ed_max
    if "cs" in _NEEDS[measure]:
        comp["cs_new"] = (metrics["cs"] + 1.0) / 2.0
    if "ls" in _NEEDS[measure]:
        ls = metrics["ls"]
        comp["ss"] = np.ones_like(ls) if norm.ls_max == 0.0 else 1.0 - ls / norm.ls_max
    if "dc" in _NEEDS[measure]:
        comp["dc"] = metrics["dc"]

    if measure is Measure.EUCLIDEAN:
        return comp["es"], comp
    if measure is Measure.COSINE:
        return comp["cs_new"], comp
    if measure is Measure.STYLE:
        return comp["ss"], comp
    if measure is Measure.DICE:
        return comp["dc"], comp
    parts = [comp[name] for name in I1_COMPONENTS[measure]]
    return _vector_harmonic(parts), comp


def _select_top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best by (score desc, id asc); exact, ties included."""
    n = scores.shape[0]
    k = min(k, n)
    if n <= 4096 or k >= n:
        order = np.lexsort((ids, -scores))
        return order[:k]
    part = np.argpartition(-scores, k - 1)[:k]
    threshold = scores[part].min()
    boundary = np.flatnonzero(scores >= threshold)  # keeps every tie at the cut
    order = boundary[np.lexsort((ids[boundary], -scores[boundary]))]
    return order[:k]


def _normalizers(
    needs: set[str], metrics: Mapping[str, np.ndarray], keep: np.ndarray
) -> QueryNormalizers:
    ed_max = float(metrics["ed"][keep].max()) if "ed" in needs else 0.0
    ls_max = float(metrics["ls"][keep].max()) if "ls" in needs else 0.0
    return QueryNormalizers(ed_max=ed_max, ls_max=ls_max)


def _build_hits(
    measure: Measure,
    index: _ScanIndex,
    chosen: np.ndarray,
    scores: np.ndarray,
    comp: Mapping[str, np.ndarray],
    metrics: Mapping[str, np.ndarray],
    include_breakdown: bool,
) -> tuple[RankedHit, ...]:
    hits = []
    for idx in chosen:
        breakdown = None
        if include_breakdown:
            i = int(idx)
            fields: dict[str, float] = {}
            if "ed" in _NEEDS[measure]:
                fields["ed"] = float(metrics["ed"][i])
                fields["es"] = float(comp["es"][i])
            if "cs" in _NEEDS[measure]:
                fields["cs"] = float(metrics["cs"][i])
                fields["cs_new"] = float(comp["cs_new"][i])
            if "ls" in _NEEDS[measure]:
                fields["ls"] = float(metrics["ls"][i])
                fields["ss"] = float(comp["ss"][i])
            if "dc" in _NEEDS[measure]:
                fields["dc"] = float(comp["dc"][i])
            if measure in I1_COMPONENTS:
                fields["i1"] = float(scores[i])
            breakdown = ScoreBreakdown(**fields)
        hits.append(
            RankedHit(id=str(index.ids[idx]), score=float(scores[idx]), breakdown=breakdown)
        )
    return tuple(hits)


# --- public entry points ------------------------------------------------------

def query(
    store: Store, query_record: RisRecord, params: QueryParams, workers: int = 1
) -> QueryResult:
    """Top-k retrieval for one measure; see the module docstring for semantics."""
    results = _run(
        store,
        query_record,
        measures=(params.measure,),
        k=params.k,
        exclude_self=params.exclude_self,
        layer_weights=params.layer_weights,
        include_breakdown=params.include_breakdown,
        workers=workers,
    )
    return results[params.measure]


def query_all_measures(
    store: Store,
    query_record: RisRecord,
    k: int = 5,
    exclude_self: bool = False,
    measures: Sequence[Measure] | None = None,
    layer_weights: tuple[float, ...] | None = None,
    include_breakdown: bool = False,
    workers: int = 1,
) -> dict[Measure, QueryResult]:
    """Query several measures at once, sharing one metric pass.

    Defaults to the nine report measures. Results are identical to
    independent `query` calls measure by measure.
    """
    chosen = tuple(measures) if measures is not None else PAPER_MEASURES
    return _run(
        store,
        query_record,
        measures=chosen,
        k=k,
        exclude_self=exclude_self,
        layer_weights=layer_weights,
        include_breakdown=include_breakdown,
        workers=workers,
    )


def _run(
    store: Store,
    query_record: RisRecord,
    measures: tuple[Measure, ...],
    k: int,
    exclude_self: bool,
    layer_weights: tuple[float, ...] | None,
    include_breakdown: bool,
    workers: int,
) -> dict[Measure, QueryResult]:
    if k < 1:
        raise OutOfRange(f"k must be >= 1, got {k}")
    if len(store) == 0:
        raise EmptyStore("store has no records")
    validate_record(query_record)
    if store.shapes is not None:
        store.shapes.check_record(query_record)

    index = _scan_index(store)
    keep = np.ones(len(store), dtype=bool)
    if exclude_self:
        keep &= index.ids != query_record.id
        if not keep.any():
            raise EmptyStore("no candidates remain after excluding the query record")

    needs = {name for m in measures for name in _NEEDS[m]}
    metrics = _compute_metrics(store, index, query_record, needs, layer_weights, workers)
    norm = _normalizers(needs, metrics, keep)

    cand = np.flatnonzero(keep)
    cand_ids = index.ids[cand]
    out: dict[Measure, QueryResult] = {}
    for measure in measures:
        scores, comp = _scores_for(measure, metrics, norm)
        chosen = cand[_select_top_k(cand_ids, scores[cand], k)]
        hits = _build_hits(measure, index, chosen, scores, comp, metrics, include_breakdown)
        out[measure] = QueryResult(
            measure=measure,
            hits=hits,
            normalizers=QueryNormalizers(
                ed_max=norm.ed_max if "ed" in _NEEDS[measure] else 0.0,
                ls_max=norm.ls_max if "ls" in _NEEDS[measure] else 0.0,
            ),
        )
    return out
