"""Validated tensor and record types shared by every other module.

A database entry (:class:`RisRecord`) bundles the precomputed tensors of one
image:

* ``feature``  -- 1-D float32 embedding (classifier output), length is the
  store-wide ``feature_dim`` (1024 by default upstream).
* ``grams``    -- tuple of square float32 Gram matrices, one per hooked
  layer; channel co-activation statistics used by the style measures.
* ``mask``     -- 2-D uint8 binary segmentation mask (1 = lesion).

Stored payloads are 32-bit; all arithmetic elsewhere accumulates in 64-bit.
Records are immutable after construction (arrays are marked read-only), so
they are safe to share across concurrent readers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyId,
    InvalidGram,
    NonBinaryMask,
    NonFiniteValue,
    ShapeMismatch,
    UnknownMeasure,
    ZeroNormFeature,
)

# Gram symmetry tolerance: |G - G^T|_inf <= GRAM_SYMMETRY_TOL * max(1, |G|_inf)
GRAM_SYMMETRY_TOL = 1e-6


class Measure(str, Enum):
    """The ten retrieval measures; values are the CLI/label tokens."""

    EUCLIDEAN = "euclidean"
    COSINE = "cosine"
    STYLE = "style"
    DICE = "dice"
    I1_ED = "i1-ed"
    I1_CD = "i1-cd"
    I1_ECD = "i1-ecd"
    I1_SE = "i1-se"
    I1_SC = "i1-sc"
    I1_SD = "i1-sd"

    def __str__(self) -> str:  # token, not Measure.XXX
        return self.value


#: The nine measures compared against each other in reports (dice alone is
#: exposed additionally as a diagnostic but is not part of this set).
PAPER_MEASURES: tuple[Measure, ...] = (
    Measure.EUCLIDEAN,
    Measure.COSINE,
    Measure.STYLE,
    Measure.I1_ED,
    Measure.I1_CD,
    Measure.I1_ECD,
    Measure.I1_SE,
    Measure.I1_SC,
    Measure.I1_SD,
)

ALL_MEASURES: tuple[Measure, ...] = tuple(Measure)


def parse_measure(token: str) -> Measure:
    """Parse a measure token, rejecting anything not in the enumeration."""
    try:
        return Measure(token)
    except ValueError:
        valid = ", ".join(m.value for m in Measure)
        raise UnknownMeasure(
            f"unknown measure {token!r}; valid measures: {valid}"
        ) from None


@dataclass(frozen=True)
class RisRecord:
    """One image's id plus its precomputed tensors.

    Build instances through :func:`make_record`, which normalizes dtypes and
    validates; the raw constructor performs no checks.
    """

    id: str
    feature: np.ndarray
    grams: tuple[np.ndarray, ...]
    mask: np.ndarray
    source_image_path: str | None = None

    @property
    def feature_dim(self) -> int:
        return int(self.feature.shape[0])

    @property
    def gram_channels(self) -> tuple[int, ...]:
        return tuple(int(g.shape[0]) for g in self.grams)

    @property
    def mask_shape(self) -> tuple[int, int]:
        return int(self.mask.shape[0]), int(self.mask.shape[1])


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def make_record(
    rec_id: str,
    feature,
    grams: Iterable,
    mask,
    source_image_path: str | None = None,
) -> RisRecord:
    """Coerce raw array-likes into a validated, immutable :class:`RisRecord`.

    Feature and Gram values are cast to float32 (the storage dtype), the mask
    to uint8. Raises a :class:`~lesionsearch.errors.ValidationError` subclass
    naming the offending field if any invariant fails.
    """
    feature_arr = _frozen(np.array(feature, dtype=np.float32, order="C"))

    mask_in = np.asarray(mask)
    if mask_in.size and not np.isin(mask_in, (0, 1)).all():
        raise NonBinaryMask(f"record {rec_id!r}: mask has pixel values outside {{0, 1}}")
    mask_arr = _frozen(np.array(mask_in, dtype=np.uint8, order="C"))

    gram_arrs = tuple(
        _frozen(np.array(g, dtype=np.float32, order="C")) for g in grams
    )

    record = RisRecord(
        id=rec_id,
        feature=feature_arr,
        grams=gram_arrs,
        mask=mask_arr,
        source_image_path=source_image_path,
    )
    return validate_record(record)


def validate_record(record: RisRecord) -> RisRecord:
    """Check every type invariant; return the record unchanged if all hold.

    Total over malformed input: any violation raises a ValidationError
    subclass (NonFiniteValue, ZeroNormFeature, NonBinaryMask, ShapeMismatch,
    EmptyId, InvalidGram) instead of propagating arbitrary exceptions.
    Idempotent: a record that passes once passes again unchanged.
    """
    rid = record.id
    if not isinstance(rid, str) or rid == "":
        raise EmptyId("record id must be a non-empty string")

    feat = np.asarray(record.feature)
    if feat.ndim != 1 or feat.shape[0] < 1:
        raise ShapeMismatch(f"record {rid!r}: feature must be 1-D with dim >= 1, got shape {feat.shape}")
    if not np.isfinite(feat).all():
        raise NonFiniteValue(f"record {rid!r}: feature contains NaN/Inf")
    if np.linalg.norm(feat.astype(np.float64)) == 0.0:
        raise ZeroNormFeature(f"record {rid!r}: feature has zero L2 norm")

    if len(record.grams) < 1:
        raise ShapeMismatch(f"record {rid!r}: at least one Gram layer required")
    for l, g in enumerate(record.grams):
        g = np.asarray(g)
        if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape[0] < 1:
            raise ShapeMismatch(f"record {rid!r}: gram layer {l} must be square, got shape {g.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteValue(f"record {rid!r}: gram layer {l} contains NaN/Inf")
        scale = max(1.0, float(np.abs(g).max()))
        asym = float(np.abs(g - g.T).max())
        if asym > GRAM_SYMMETRY_TOL * scale:
            raise InvalidGram(f"record {rid!r}: gram layer {l} asymmetric (|G-G^T|_inf = {asym:g})")
        if float(np.diagonal(g).min()) < 0.0:
            raise InvalidGram(f"record {rid!r}: gram layer {l} has a negative diagonal entry")

    m = np.asarray(record.mask)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeMismatch(f"record {rid!r}: mask must be 2-D with dims >= 1, got shape {m.shape}")
    if m.size and not np.isin(m, (0, 1)).all():
        raise NonBinaryMask(f"record {rid!r}: mask has pixel values outside {{0, 1}}")

    return record


def validate_feature_maps(maps: Sequence[np.ndarray], rec_id: str = "<maps>") -> None:
    """Validate a feature-map stack: non-empty, each layer H x W x C of finite reals."""
    if len(maps) < 1:
        raise ShapeMismatch(f"{rec_id}: feature-map stack must be non-empty")
    for l, fm in enumerate(maps):
        fm = np.asarray(fm)
        if fm.ndim != 3 or min(fm.shape) < 1:
            raise ShapeMismatch(
                f"{rec_id}: layer {l} must be H x W x C with all dims >= 1, got shape {fm.shape}"
            )
        if not np.isfinite(fm).all():
            raise NonFiniteValue(f"{rec_id}: layer {l} contains NaN/Inf")


def with_id(record: RisRecord, new_id: str) -> RisRecord:
    """Copy of the record under a different id (tensors shared)."""
    return validate_record(replace(record, id=new_id))
