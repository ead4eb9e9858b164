"""Persistent on-disk store of precomputed per-image tensors.

Layout: a directory holding `manifest.txt` plus one binary blob per record
under `blobs/`. The byte-level contract lives in `wire_format.md` next to
this module (printed by `lesionsearch format-docs`). Properties the format
guarantees:

* write-then-load is the identity on records (32-bit payloads, bit-exact);
* blobs and the manifest are written via temp-file + rename, and the
  manifest last, so a killed ingest never leaves a half-written store;
* every blob carries a CRC-32 in the manifest, so any corruption of a
  single byte is detected on load.

Loaded stores are immutable and safe to share across query threads; one
writer at a time per store directory.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    ChecksumMismatch,
    DuplicateId,
    IoFailure,
    MissingBlob,
    ShapeMismatch,
    StoreError,
    UnsupportedVersion,
)
from .gram import GramConfig, average_gram_sets, gram_stack
from .records import RisRecord, make_record, validate_record

MAGIC = b"RIS1"
MANIFEST_NAME = "manifest.txt"
BLOB_DIR = "blobs"
FORMAT_VERSION = 1

META_NAME = "meta.json"
FEATURE_FILE = "feature.f32"
MASK_FILE = "mask.u8"


@dataclass(frozen=True)
class StoreShapes:
    """Store-wide tensor shapes every record must match."""

    feature_dim: int
    gram_channels: tuple[int, ...]
    mask_shape: tuple[int, int]

    @staticmethod
    def of_record(record: RisRecord) -> "StoreShapes":
        return StoreShapes(record.feature_dim, record.gram_channels, record.mask_shape)

    def check_record(self, record: RisRecord) -> None:
        got = StoreShapes.of_record(record)
        if got != self:
            raise ShapeMismatch(
                f"record {record.id!r} has shapes {got}, store requires {self}"
            )

    def blob_length(self, id_byte_len: int) -> int:
        gram_floats = sum(c * c for c in self.gram_channels)
        h, w = self.mask_shape
        return 8 + id_byte_len + 4 * self.feature_dim + 4 * gram_floats + h * w


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    length: int
    crc32: str


@dataclass(frozen=True)
class StoreManifest:
    version: int
    shapes: StoreShapes
    entries: tuple[ManifestEntry, ...]


class Store:
    """An in-memory store: validated records in manifest order.

    `shapes` is None only for an empty store. Instances are treated as
    immutable; the engine caches scan structures per Store object.
    """

    def __init__(
        self,
        records: Sequence[RisRecord],
        shapes: StoreShapes | None,
        directory: Path | None = None,
        manifest: StoreManifest | None = None,
    ):
        self.records: tuple[RisRecord, ...] = tuple(records)
        self.shapes = shapes
        self.directory = directory
        self.manifest = manifest
        self._by_id = {r.id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            raise DuplicateId("store contains records with duplicate ids")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[RisRecord]:
        return iter(self.records)

    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.records)

    def get(self, rec_id: str) -> RisRecord | None:
        return self._by_id.get(rec_id)

    @property
    def version(self) -> int:
        return self.manifest.version if self.manifest else FORMAT_VERSION

    @staticmethod
    def from_records(records: Sequence[RisRecord]) -> "Store":
        """Build an in-memory store (no backing directory) from records."""
        records = [validate_record(r) for r in records]
        shapes = StoreShapes.of_record(records[0]) if records else None
        if shapes is not None:
            for r in records[1:]:
                shapes.check_record(r)
        return Store(records, shapes)


# --- blob encoding ----------------------------------------------------------

def record_to_blob(record: RisRecord) -> bytes:
    """Serialize one record to the fixed-order little-endian blob format."""
    id_bytes = record.id.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(id_bytes)), id_bytes]
    parts.append(np.ascontiguousarray(record.feature, dtype="<f4").tobytes())
    for g in record.grams:
        parts.append(np.ascontiguousarray(g, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(record.mask, dtype=np.uint8).tobytes())
    return b"".join(parts)


def blob_to_record(
    data: bytes, shapes: StoreShapes, expected_id: str | None = None
) -> RisRecord:
    """Parse and validate a record blob against store-wide shapes."""
    if len(data) < 8 or data[:4] != MAGIC:
        raise StoreError("blob does not start with the RIS1 magic")
    (id_len,) = struct.unpack_from("<I", data, 4)
    if len(data) != shapes.blob_length(id_len):
        raise ShapeMismatch(
            f"blob length {len(data)} does not match store shapes (expected {shapes.blob_length(id_len)})"
        )
    off = 8
    rec_id = data[off : off + id_len].decode("utf-8")
    off += id_len
    if expected_id is not None and rec_id != expected_id:
        raise StoreError(f"blob id {rec_id!r} does not match manifest id {expected_id!r}")

    feature = np.frombuffer(data, dtype="<f4", count=shapes.feature_dim, offset=off)
    off += 4 * shapes.feature_dim
    grams = []
    for c in shapes.gram_channels:
        g = np.frombuffer(data, dtype="<f4", count=c * c, offset=off).reshape(c, c)
        off += 4 * c * c
        grams.append(g)
    h, w = shapes.mask_shape
    mask = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=off).reshape(h, w)
    return make_record(rec_id, feature, grams, mask)


def _crc(data: bytes) -> str:
    return format(zlib.crc32(data) & 0xFFFFFFFF, "08x")


# --- manifest text ----------------------------------------------------------

def _render_manifest(manifest: StoreManifest) -> str:
    s = manifest.shapes
    lines = [
        f"RIS-STORE v{manifest.version}",
        f"feature_dim={s.feature_dim}",
        "gram_channels=" + ",".join(str(c) for c in s.gram_channels),
        f"mask_height={s.mask_shape[0]}",
        f"mask_width={s.mask_shape[1]}",
        f"records={len(manifest.entries)}",
    ]
    for e in manifest.entries:
        lines.append(f"{e.path}\t{e.length}\t{e.crc32}\t{json.dumps(e.id, ensure_ascii=False)}")
    return "\n".join(lines) + "\n"


def _parse_manifest(text: str) -> StoreManifest:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("RIS-STORE v"):
        raise StoreError("not a store manifest (missing 'RIS-STORE v<N>' header)")
    try:
        version = int(lines[0].removeprefix("RIS-STORE v"))
    except ValueError:
        raise StoreError(f"malformed manifest header: {lines[0]!r}") from None
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"store format version {version} not supported (expected {FORMAT_VERSION})")

    kv = {}
    idx = 1
    for idx in range(1, 6):
        if idx >= len(lines) or "=" not in lines[idx]:
            raise StoreError("manifest is missing shape/record-count lines")
        key, _, value = lines[idx].partition("=")
        kv[key] = value
    try:
        shapes = StoreShapes(
            feature_dim=int(kv["feature_dim"]),
            gram_channels=tuple(int(c) for c in kv["gram_channels"].split(",") if c != ""),
            mask_shape=(int(kv["mask_height"]), int(kv["mask_width"])),
        )
        count = int(kv["records"])
    except (KeyError, ValueError) as exc:
        raise StoreError(f"malformed manifest shape lines: {exc}") from None

    entries = []
    record_lines = [ln for ln in lines[6:] if ln.strip() != ""]
    if len(record_lines) != count:
        raise StoreError(f"manifest declares {count} records but lists {len(record_lines)}")
    for ln in record_lines:
        fields = ln.split("\t", 3)
        if len(fields) != 4:
            raise StoreError(f"malformed manifest record line: {ln!r}")
        path, length_s, crc, id_json = fields
        try:
            entries.append(ManifestEntry(id=json.loads(id_json), path=path, length=int(length_s), crc32=crc))
        except (ValueError, json.JSONDecodeError):
            raise StoreError(f"malformed manifest record line: {ln!r}") from None
    return StoreManifest(version=version, shapes=shapes, entries=tuple(entries))


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise IoFailure(f"failed to write {path}: {exc}") from exc


def _read_manifest(store_dir: Path) -> StoreManifest | None:
    mpath = store_dir / MANIFEST_NAME
    if not mpath.exists():
        return None
    try:
        text = mpath.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"failed to read {mpath}: {exc}") from exc
    return _parse_manifest(text)


# --- write paths ------------------------------------------------------------

def write_record(store_dir, record: RisRecord) -> ManifestEntry:
    """Append one validated record to the store, atomically.

    The first record of an empty store fixes the store-wide shapes; later
    records must match them. Blob first (temp + rename), manifest last.
    """
    return write_records(store_dir, [record])[0]


def write_records(store_dir, records: Sequence[RisRecord]) -> list[ManifestEntry]:
    """Append several records with a single manifest update."""
    store_dir = Path(store_dir)
    if not records:
        return []
    manifest = _read_manifest(store_dir)
    known_ids = {e.id for e in manifest.entries} if manifest else set()
    shapes = manifest.shapes if manifest else None

    validated = []
    for record in records:
        validate_record(record)
        if record.id in known_ids:
            raise DuplicateId(f"record id {record.id!r} already present in store")
        known_ids.add(record.id)
        if shapes is None:
            shapes = StoreShapes.of_record(record)
        else:
            shapes.check_record(record)
        validated.append(record)

    try:
        (store_dir / BLOB_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create store directory {store_dir}: {exc}") from exc

    base = len(manifest.entries) if manifest else 0
    new_entries = []
    for i, record in enumerate(validated):
        blob = record_to_blob(record)
        rel = f"{BLOB_DIR}/{base + i:06d}.ris"
        _atomic_write(store_dir / rel, blob)
        new_entries.append(
            ManifestEntry(id=record.id, path=rel, length=len(blob), crc32=_crc(blob))
        )

    entries = (manifest.entries if manifest else ()) + tuple(new_entries)
    updated = StoreManifest(version=FORMAT_VERSION, shapes=shapes, entries=entries)
    _atomic_write(store_dir / MANIFEST_NAME, _render_manifest(updated).encode("utf-8"))
    return new_entries


def load_store(store_dir) -> Store:
    """Load and validate every record; manifest order is record order.

    A directory without a manifest is an empty store. Corruption raises
    ChecksumMismatch/MissingBlob naming the record id.
    """
    store_dir = Path(store_dir)
    if not store_dir.is_dir():
        raise IoFailure(f"store directory {store_dir} does not exist")
    manifest = _read_manifest(store_dir)
    if manifest is None:
        return Store([], None, directory=store_dir, manifest=None)

    records = []
    for entry in manifest.entries:
        path = store_dir / entry.path
        if not path.exists():
            raise MissingBlob(f"record {entry.id!r}: blob {entry.path} is missing")
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise IoFailure(f"record {entry.id!r}: cannot read blob: {exc}") from exc
        if len(data) != entry.length or _crc(data) != entry.crc32:
            raise ChecksumMismatch(
                f"record {entry.id!r}: blob {entry.path} does not match its manifest length/CRC"
            )
        records.append(blob_to_record(data, manifest.shapes, expected_id=entry.id))
    return Store(records, manifest.shapes, directory=store_dir, manifest=manifest)


def ingest_raw(
    store_dir,
    rec_id: str,
    feature,
    map_stacks,
    mask,
    cfg: GramConfig,
    source_image_path: str | None = None,
) -> ManifestEntry:
    """Compute Gram matrices from raw feature maps and store the record.

    `map_stacks` is either one feature-map stack (sequence of H x W x C
    arrays) or a list of per-model stacks; multiple stacks are Gram-averaged
    elementwise per layer (the ensemble dataflow). The stored record holds
    the averaged Gram set, never the raw maps.
    """
    stacks = _as_stack_list(map_stacks)
    gram_sets = [gram_stack(stack, cfg) for stack in stacks]
    grams = average_gram_sets(gram_sets) if len(gram_sets) > 1 else gram_sets[0]
    record = make_record(rec_id, feature, grams, mask, source_image_path)
    return write_record(store_dir, record)


def _as_stack_list(map_stacks) -> list[list[np.ndarray]]:
    if len(map_stacks) == 0:
        raise ShapeMismatch("feature-map input is empty")
    first = map_stacks[0]
    if isinstance(first, np.ndarray) and first.ndim == 3:
        return [list(map_stacks)]
    return [list(stack) for stack in map_stacks]


# --- ingest bundles ---------------------------------------------------------

@dataclass(frozen=True)
class Bundle:
    """Parsed ingest bundle: raw tensors for one image, possibly per-model."""

    id: str
    feature: np.ndarray
    map_stacks: tuple[tuple[np.ndarray, ...], ...]
    mask: np.ndarray
    metadata: dict = field(default_factory=dict)


def _read_exact(path: Path, nbytes: int) -> bytes:
    if not path.exists():
        raise StoreError(f"bundle file {path.name} is missing")
    data = path.read_bytes()
    if len(data) != nbytes:
        raise ShapeMismatch(f"bundle file {path.name} is {len(data)} bytes, expected {nbytes}")
    return data


def load_bundle(bundle_dir) -> Bundle:
    """Read one bundle directory per the wire format; raises on any size/shape lie."""
    bundle_dir = Path(bundle_dir)
    meta_path = bundle_dir / META_NAME
    if not meta_path.exists():
        raise StoreError(f"{bundle_dir} is not a bundle ({META_NAME} missing)")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StoreError(f"cannot parse {meta_path}: {exc}") from exc

    try:
        version = int(meta["format_version"])
        rec_id = meta["id"]
        feature_dim = int(meta["feature_dim"])
        model_count = int(meta.get("model_count", 1))
        layers = [(int(l["height"]), int(l["width"]), int(l["channels"])) for l in meta["layers"]]
        mask_h = int(meta["mask_height"])
        mask_w = int(meta["mask_width"])
    except (KeyError, TypeError, ValueError) as exc:
        raise StoreError(f"bundle {bundle_dir.name}: malformed {META_NAME}: {exc}") from exc
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"bundle format version {version} not supported")

    feature = np.frombuffer(
        _read_exact(bundle_dir / FEATURE_FILE, 4 * feature_dim), dtype="<f4"
    )
    stacks = []
    for m in range(model_count):
        stack = []
        for l, (h, w, c) in enumerate(layers):
            data = _read_exact(bundle_dir / f"model{m:02d}_layer{l:02d}.f32", 4 * h * w * c)
            stack.append(np.frombuffer(data, dtype="<f4").reshape(h, w, c))
        stacks.append(tuple(stack))
    mask = np.frombuffer(
        _read_exact(bundle_dir / MASK_FILE, mask_h * mask_w), dtype=np.uint8
    ).reshape(mask_h, mask_w)
    return Bundle(
        id=rec_id,
        feature=feature,
        map_stacks=tuple(stacks),
        mask=mask,
        metadata=dict(meta.get("metadata", {})),
    )


def write_bundle(
    bundle_dir,
    rec_id: str,
    feature,
    map_stacks,
    mask,
    metadata: dict | None = None,
) -> Path:
    """Write a bundle directory (used by fixtures and demos; extractors
    implement the same format independently)."""
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    stacks = _as_stack_list(map_stacks)
    feature = np.ascontiguousarray(feature, dtype="<f4")
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    meta = {
        "format_version": FORMAT_VERSION,
        "id": rec_id,
        "feature_dim": int(feature.shape[0]),
        "model_count": len(stacks),
        "layers": [
            {"height": int(fm.shape[0]), "width": int(fm.shape[1]), "channels": int(fm.shape[2])}
            for fm in stacks[0]
        ],
        "mask_height": int(mask.shape[0]),
        "mask_width": int(mask.shape[1]),
        "metadata": dict(metadata or {}),
    }
    (bundle_dir / META_NAME).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    (bundle_dir / FEATURE_FILE).write_bytes(feature.tobytes())
    for m, stack in enumerate(stacks):
        for l, fm in enumerate(stack):
            fm = np.ascontiguousarray(fm, dtype="<f4")
            (bundle_dir / f"model{m:02d}_layer{l:02d}.f32").write_bytes(fm.tobytes())
    (bundle_dir / MASK_FILE).write_bytes(mask.tobytes())
    return bundle_dir


def ingest_bundle(store_dir, bundle_dir, cfg: GramConfig | None = None) -> ManifestEntry:
    """Load a bundle, compute/average its Gram sets, and store the record."""
    bundle = load_bundle(bundle_dir)
    if cfg is None:
        cfg = GramConfig.uniform(len(bundle.map_stacks[0]))
    return ingest_raw(
        store_dir,
        bundle.id,
        bundle.feature,
        list(bundle.map_stacks),
        bundle.mask,
        cfg,
    )


def read_record_blob_file(path, shapes: StoreShapes) -> RisRecord:
    """Parse a single-record blob file (e.g. a query record) with known shapes."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read record file {path}: {exc}") from exc
    return blob_to_record(data, shapes)
