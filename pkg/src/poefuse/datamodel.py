"""Dataset schema and manifest ingestion.

A dataset is a JSON Lines manifest: the first line is a header object
``{"d_s": ..., "d_t": ..., "d_a": ..., "n": ...}`` and every following line
is one record. Feature vectors are stored inline as JSON arrays or as
``{"file": <path>, "offset": <vector index>}`` references into a sidecar
binary (relative paths resolve against the manifest's directory).

Sidecar binaries hold little-endian IEEE-754 float32 vectors behind a
16-byte header: magic ``POEF``, u32 version (1), u32 dim, u32 count.
Storage is 32-bit for compact bit-exact interchange; everything is widened
to float64 as soon as it is in memory.

A parsed manifest is immutable (frozen dataclasses, read-only arrays) and
safe to share across threads or worker processes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIDECAR_MAGIC = b"POEF"
SIDECAR_VERSION = 1
_SIDECAR_HEADER = struct.Struct("<4sIII")

LANGUAGES = ("en", "zh")
GENDERS = ("f", "m")
LABELS = ("mci", "nc")

MMSE_MIN = 0.0
MMSE_MAX = 30.0

VECTOR_FIELDS = ("speech_vec", "text_vec", "acoustic_vec")


class ManifestError(Exception):
    """Raised for malformed manifests, sidecars, or invalid records."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class FeatureRecord:
    """One speech sample: identifiers, demographics, label, and features."""

    sample_id: str
    participant_id: str
    language: str  # "en" | "zh"
    gender: str  # "f" | "m"
    age: float
    label: str  # "mci" | "nc"
    mmse: float
    speech_vec: np.ndarray
    text_vec: np.ndarray
    acoustic_vec: np.ndarray

    def __post_init__(self):
        for name in VECTOR_FIELDS:
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    def vector(self, field_name: str) -> np.ndarray:
        return getattr(self, field_name)


@dataclass(frozen=True)
class ManifestHeader:
    d_s: int
    d_t: int
    d_a: int
    n: int

    def dims(self) -> dict[str, int]:
        return {"speech_vec": self.d_s, "text_vec": self.d_t, "acoustic_vec": self.d_a}


@dataclass(frozen=True)
class DatasetManifest:
    header: ManifestHeader
    records: tuple[FeatureRecord, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.records)


def validate_record(rec: FeatureRecord, header: ManifestHeader) -> list[str]:
    """Return every invariant violated by ``rec`` (empty list means valid)."""
    violations = []
    if rec.language not in LANGUAGES:
        violations.append(f"language must be one of {LANGUAGES}, got {rec.language!r}")
    if rec.gender not in GENDERS:
        violations.append(f"gender must be one of {GENDERS}, got {rec.gender!r}")
    if rec.label not in LABELS:
        violations.append(f"label must be one of {LABELS}, got {rec.label!r}")
    if not np.isfinite(rec.age) or rec.age <= 0:
        violations.append(f"age must be positive, got {rec.age}")
    if not np.isfinite(rec.mmse) or not (MMSE_MIN <= rec.mmse <= MMSE_MAX):
        violations.append(f"mmse out of range [{MMSE_MIN:g}, {MMSE_MAX:g}]: {rec.mmse}")
    for name, want in header.dims().items():
        vec = rec.vector(name)
        if vec.ndim != 1 or vec.shape[0] != want:
            violations.append(f"{name} dim mismatch: expected {want}, got {vec.shape}")
        elif not np.all(np.isfinite(vec)):
            violations.append(f"{name} contains non-finite entries")
    return violations


def partition_by_subgroup(records) -> dict[str, list[FeatureRecord]]:
    """Split records into the four reporting subgroups M, F, En, Zh.

    Every record lands in exactly one gender group and one language group,
    so the gender groups and the language groups each partition the input.
    """
    groups: dict[str, list[FeatureRecord]] = {"M": [], "F": [], "En": [], "Zh": []}
    for rec in records:
        groups["M" if rec.gender == "m" else "F"].append(rec)
        groups["En" if rec.language == "en" else "Zh"].append(rec)
    return groups


# ---------------------------------------------------------------------------
# Sidecar binaries
# ---------------------------------------------------------------------------

def write_sidecar(path, vectors: np.ndarray) -> None:
    """Write a (count, dim) float array as a float32 sidecar binary."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError(f"sidecar payload must be 2-D (count, dim), got {vectors.shape}")
    count, dim = vectors.shape
    with open(path, "wb") as fh:
        fh.write(_SIDECAR_HEADER.pack(SIDECAR_MAGIC, SIDECAR_VERSION, dim, count))
        fh.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())


def read_sidecar(path) -> np.ndarray:
    """Read a sidecar binary back as a (count, dim) float64 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _SIDECAR_HEADER.size:
        raise ManifestError(f"{path}: sidecar truncated (no header)")
    magic, version, dim, count = _SIDECAR_HEADER.unpack_from(raw)
    if magic != SIDECAR_MAGIC:
        raise ManifestError(f"{path}: bad sidecar magic {magic!r}")
    if version != SIDECAR_VERSION:
        raise ManifestError(f"{path}: unsupported sidecar version {version}")
    payload = raw[_SIDECAR_HEADER.size:]
    expected = 4 * dim * count
    if len(payload) != expected:
        raise ManifestError(
            f"{path}: sidecar payload is {len(payload)} bytes, expected {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return data.reshape(count, dim)


class _SidecarCache:
    """Lazily loads sidecar files referenced by a manifest, at most once each."""

    def __init__(self, base_dir: Path):
        self.base_dir = base_dir
        self._loaded: dict[Path, np.ndarray] = {}

    def fetch(self, ref: dict, expected_dim: int, context: str) -> np.ndarray:
        if set(ref) != {"file", "offset"}:
            raise ManifestError(f"{context}: vector reference must have keys file/offset")
        path = (self.base_dir / str(ref["file"])).resolve()
        if path not in self._loaded:
            self._loaded[path] = read_sidecar(path)
        table = self._loaded[path]
        if table.shape[1] != expected_dim:
            raise ManifestError(
                f"{context}: sidecar {path.name} holds dim {table.shape[1]}, "
                f"expected {expected_dim}"
            )
        offset = ref["offset"]
        if not isinstance(offset, int) or not (0 <= offset < table.shape[0]):
            raise ManifestError(
                f"{context}: offset {offset} out of range for {table.shape[0]} vectors"
            )
        return table[offset]


# ---------------------------------------------------------------------------
# Manifest parsing / serialization
# ---------------------------------------------------------------------------

def _parse_header(line: str) -> ManifestHeader:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line 1: malformed header: {exc}") from None
    if not isinstance(obj, dict) or set(obj) != {"d_s", "d_t", "d_a", "n"}:
        raise ManifestError("line 1: header must be an object with keys d_s,d_t,d_a,n")
    for key in ("d_s", "d_t", "d_a"):
        if not isinstance(obj[key], int) or obj[key] <= 0:
            raise ManifestError(f"line 1: header {key} must be a positive integer")
    if not isinstance(obj["n"], int) or obj["n"] < 0:
        raise ManifestError("line 1: header n must be a non-negative integer")
    return ManifestHeader(d_s=obj["d_s"], d_t=obj["d_t"], d_a=obj["d_a"], n=obj["n"])


def _record_from_obj(obj: dict, header: ManifestHeader, sidecars: _SidecarCache,
                     context: str) -> FeatureRecord:
    required = {"sample_id", "participant_id", "language", "gender", "age",
                "label", "mmse", *VECTOR_FIELDS}
    missing = required - set(obj)
    if missing:
        raise ManifestError(f"{context}: missing fields {sorted(missing)}")
    vectors = {}
    for name, dim in header.dims().items():
        payload = obj[name]
        if isinstance(payload, list):
            vectors[name] = np.asarray(payload, dtype=np.float64)
        elif isinstance(payload, dict):
            vectors[name] = sidecars.fetch(payload, dim, f"{context}: {name}")
        else:
            raise ManifestError(f"{context}: {name} must be an array or a file reference")
    return FeatureRecord(
        sample_id=str(obj["sample_id"]),
        participant_id=str(obj["participant_id"]),
        language=str(obj["language"]),
        gender=str(obj["gender"]),
        age=float(obj["age"]),
        label=str(obj["label"]),
        mmse=float(obj["mmse"]),
        speech_vec=vectors["speech_vec"],
        text_vec=vectors["text_vec"],
        acoustic_vec=vectors["acoustic_vec"],
    )


def parse_manifest(path) -> DatasetManifest:
    """Parse a JSONL manifest, resolving sidecar references and validating
    every record. Errors carry the 1-based line number."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest (missing header line)")
    header = _parse_header(lines[0])
    sidecars = _SidecarCache(path.parent)

    records = []
    seen_ids: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        context = f"line {lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{context}: malformed record: {exc}") from None
        if not isinstance(obj, dict):
            raise ManifestError(f"{context}: record must be a JSON object")
        rec = _record_from_obj(obj, header, sidecars, context)
        violations = validate_record(rec, header)
        if violations:
            raise ManifestError(f"{context}: " + "; ".join(violations))
        if rec.sample_id in seen_ids:
            raise ManifestError(f"{context}: duplicate sample_id {rec.sample_id!r}")
        seen_ids.add(rec.sample_id)
        records.append(rec)

    if header.n != len(records):
        raise ManifestError(
            f"{path}: header declares n={header.n} but manifest has {len(records)} records"
        )
    return DatasetManifest(header=header, records=tuple(records))


def _record_to_obj(rec: FeatureRecord) -> dict:
    return {
        "sample_id": rec.sample_id,
        "participant_id": rec.participant_id,
        "language": rec.language,
        "gender": rec.gender,
        "age": rec.age,
        "label": rec.label,
        "mmse": rec.mmse,
        "speech_vec": rec.speech_vec.tolist(),
        "text_vec": rec.text_vec.tolist(),
        "acoustic_vec": rec.acoustic_vec.tolist(),
    }


def manifest_to_jsonl(manifest: DatasetManifest) -> str:
    """Serialize with inline vectors. JSON float repr round-trips float64
    exactly, so parse(serialize(m)) is bit-exact."""
    h = manifest.header
    out = [json.dumps({"d_s": h.d_s, "d_t": h.d_t, "d_a": h.d_a, "n": h.n})]
    out.extend(json.dumps(_record_to_obj(rec)) for rec in manifest.records)
    return "\n".join(out) + "\n"


def serialize_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest_to_jsonl(manifest), encoding="utf-8")


def serialize_manifest_with_sidecars(manifest: DatasetManifest, path,
                                     sidecar_fields=("acoustic_vec",)) -> None:
    """Like serialize_manifest, but the named vector fields go into one
    float32 sidecar binary each (``<manifest>.<field>.bin``) and the
    manifest stores {file, offset} references. Values round-trip at
    float32 precision."""
    path = Path(path)
    dims = manifest.header.dims()
    refs = {}
    for field_name in sidecar_fields:
        if field_name not in VECTOR_FIELDS:
            raise ValueError(f"unknown vector field {field_name!r}")
        if manifest.records:
            table = np.stack([rec.vector(field_name) for rec in manifest.records])
        else:
            table = np.zeros((0, dims[field_name]))
        bin_name = f"{path.name}.{field_name}.bin"
        write_sidecar(path.parent / bin_name, table)
        refs[field_name] = bin_name

    h = manifest.header
    lines = [json.dumps({"d_s": h.d_s, "d_t": h.d_t, "d_a": h.d_a, "n": h.n})]
    for i, rec in enumerate(manifest.records):
        obj = _record_to_obj(rec)
        for field_name, bin_name in refs.items():
            obj[field_name] = {"file": bin_name, "offset": i}
        lines.append(json.dumps(obj))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_manifest(records, d_s: int, d_t: int, d_a: int) -> DatasetManifest:
    """Assemble and validate a manifest from in-memory records."""
    header = ManifestHeader(d_s=d_s, d_t=d_t, d_a=d_a, n=len(records))
    seen: set[str] = set()
    for rec in records:
        violations = validate_record(rec, header)
        if violations:
            raise ManifestError(f"record {rec.sample_id!r}: " + "; ".join(violations))
        if rec.sample_id in seen:
            raise ManifestError(f"duplicate sample_id {rec.sample_id!r}")
        seen.add(rec.sample_id)
    return DatasetManifest(header=header, records=tuple(records))
