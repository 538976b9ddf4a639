"""Feature dumps: the FeatureSet container, FVEC binary I/O, manifests and transforms.

FVEC layout (all little-endian)::

    b"FVEC"  u16 version  u64 N  u32 D  u16 S  u32 stage_width * S
    u8 flags (bit0 logits, bit1 labels)  [u32 C  if any flag]
    f32 data[N*D]  [f32 logits[N*C]]  [u32 labels[N]]
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArgumentError, CorruptionError, FormatError, UnsupportedVersionError, ValidationError

FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1
ROLES = ("id_train", "id_val", "id_test", "ood_val", "ood_test")

_FLAG_LOGITS = 1
_FLAG_LABELS = 2


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """N x D pooled features split into per-stage segments, plus optional logits/labels."""

    data: np.ndarray
    stage_dims: tuple[int, ...]
    logits: np.ndarray | None = None
    labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ArgumentError(f"data must be 2-D, got shape {data.shape}")
        dims = tuple(int(d) for d in self.stage_dims)
        if not dims or any(d <= 0 for d in dims) or sum(dims) != data.shape[1]:
            raise ArgumentError(f"stage_dims {dims} do not partition width {data.shape[1]}")
        if not np.isfinite(data).all():
            raise ValidationError(f"feature set {self.name!r} contains non-finite values")
        logits = self.logits
        if logits is not None:
            logits = np.ascontiguousarray(logits, dtype=np.float32)
            if logits.ndim != 2 or logits.shape[0] != data.shape[0]:
                raise ArgumentError(f"logits shape {logits.shape} does not match N={data.shape[0]}")
            if not np.isfinite(logits).all():
                raise ValidationError(f"feature set {self.name!r} has non-finite logits")
        labels = self.labels
        if labels is not None:
            labels = np.ascontiguousarray(labels, dtype=np.int64)
            if logits is None:
                raise ArgumentError("labels require logits")
            if labels.shape != (data.shape[0],):
                raise ArgumentError(f"labels shape {labels.shape} does not match N={data.shape[0]}")
            if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
                raise ValidationError("labels out of range [0, C)")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "stage_dims", dims)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def n_classes(self) -> int | None:
        return None if self.logits is None else self.logits.shape[1]

    def stage_offsets(self) -> list[tuple[int, int]]:
        edges = np.concatenate([[0], np.cumsum(self.stage_dims)])
        return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def stage(self, index: int) -> np.ndarray:
        if not 0 <= index < len(self.stage_dims):
            raise ArgumentError(f"stage {index} out of range for {len(self.stage_dims)} stages")
        lo, hi = self.stage_offsets()[index]
        return self.data[:, lo:hi]

    def take(self, rows: np.ndarray) -> FeatureSet:
        return FeatureSet(
            data=self.data[rows],
            stage_dims=self.stage_dims,
            logits=None if self.logits is None else self.logits[rows],
            labels=None if self.labels is None else self.labels[rows],
            name=self.name,
        )

    def with_data(self, data: np.ndarray, stage_dims: Sequence[int] | None = None) -> FeatureSet:
        return FeatureSet(
            data=data,
            stage_dims=self.stage_dims if stage_dims is None else tuple(stage_dims),
            logits=self.logits,
            labels=self.labels,
            name=self.name,
        )

    def equals(self, other: FeatureSet) -> bool:
        """Bit-exact comparison of every array and the segmentation."""

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()

        return (
            self.stage_dims == other.stage_dims
            and same(self.data, other.data)
            and same(self.logits, other.logits)
            and same(self.labels, other.labels)
        )


# --------------------------------------------------------------------------- #
# atomic file output
# --------------------------------------------------------------------------- #


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --------------------------------------------------------------------------- #
# FVEC
# --------------------------------------------------------------------------- #


def encode_fvec(fs: FeatureSet) -> bytes:
    flags = (_FLAG_LOGITS if fs.logits is not None else 0) | (_FLAG_LABELS if fs.labels is not None else 0)
    parts = [
        FVEC_MAGIC,
        struct.pack("<HQIH", FVEC_VERSION, fs.n, fs.dim, len(fs.stage_dims)),
        struct.pack(f"<{len(fs.stage_dims)}I", *fs.stage_dims),
        struct.pack("<B", flags),
    ]
    if flags:
        parts.append(struct.pack("<I", fs.n_classes))
    parts.append(fs.data.astype("<f4").tobytes())
    if fs.logits is not None:
        parts.append(fs.logits.astype("<f4").tobytes())
    if fs.labels is not None:
        parts.append(fs.labels.astype("<u4").tobytes())
    return b"".join(parts)


def write_fvec(path: str | os.PathLike, fs: FeatureSet) -> None:
    atomic_write_bytes(path, encode_fvec(fs))


def _unpack(fmt: str, buf: bytes, pos: int):
    size = struct.calcsize(fmt)
    if pos + size > len(buf):
        raise CorruptionError("FVEC header truncated")
    return struct.unpack_from(fmt, buf, pos), pos + size


def parse_fvec_header(buf: bytes) -> dict:
    if len(buf) < 4 or buf[:4] != FVEC_MAGIC:
        raise FormatError("not an FVEC file (bad magic)")
    (version, n, d, s), pos = _unpack("<HQIH", buf, 4)
    if version != FVEC_VERSION:
        raise UnsupportedVersionError(f"FVEC version {version} not supported (expected {FVEC_VERSION})")
    widths, pos = _unpack(f"<{s}I", buf, pos)
    (flags,), pos = _unpack("<B", buf, pos)
    c = None
    if flags & (_FLAG_LOGITS | _FLAG_LABELS):
        (c,), pos = _unpack("<I", buf, pos)
    if flags & ~(_FLAG_LOGITS | _FLAG_LABELS):
        raise FormatError(f"unknown FVEC flags {flags:#x}")
    return {
        "version": version,
        "n": n,
        "d": d,
        "stage_dims": list(widths),
        "has_logits": bool(flags & _FLAG_LOGITS),
        "has_labels": bool(flags & _FLAG_LABELS),
        "n_classes": c,
        "header_bytes": pos,
    }


def decode_fvec(buf: bytes, name: str = "") -> FeatureSet:
    h = parse_fvec_header(buf)
    n, d, c = h["n"], h["d"], h["n_classes"]
    if sum(h["stage_dims"]) != d:
        raise CorruptionError(f"stage widths {h['stage_dims']} do not sum to D={d}")
    expected = n * d * 4
    if h["has_logits"]:
        expected += n * c * 4
    if h["has_labels"]:
        expected += n * 4
    pos = h["header_bytes"]
    if len(buf) - pos != expected:
        raise CorruptionError(
            f"payload holds {len(buf) - pos} bytes but header declares N={n}, D={d}, C={c} ({expected} bytes)"
        )
    data = np.frombuffer(buf, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
    pos += n * d * 4
    logits = labels = None
    if h["has_logits"]:
        logits = np.frombuffer(buf, dtype="<f4", count=n * c, offset=pos).reshape(n, c)
        pos += n * c * 4
    if h["has_labels"]:
        labels = np.frombuffer(buf, dtype="<u4", count=n, offset=pos).astype(np.int64)
        if logits is None:
            raise CorruptionError("labels present without logits")
    return FeatureSet(data=data.astype(np.float32), stage_dims=h["stage_dims"], logits=logits, labels=labels, name=name)


def read_fvec(path: str | os.PathLike) -> FeatureSet:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return decode_fvec(buf, name=path.stem)


def fvec_roundtrip(path: str | os.PathLike, fs: FeatureSet) -> FeatureSet:
    write_fvec(path, fs)
    return read_fvec(path)


# --------------------------------------------------------------------------- #
# transforms
# --------------------------------------------------------------------------- #


def parse_stage_subset(spec: str | Sequence[int], n_stages: int) -> list[int]:
    """Accept explicit indices or the shorthands ``all`` and ``last-k``."""
    if isinstance(spec, str):
        s = spec.strip()
        if s == "all":
            return list(range(n_stages))
        if s.startswith("last-"):
            try:
                k = int(s[5:])
            except ValueError as exc:
                raise ArgumentError(f"bad stage subset {spec!r}") from exc
            if not 1 <= k <= n_stages:
                raise ArgumentError(f"{spec!r} needs 1 <= k <= {n_stages}")
            return list(range(n_stages - k, n_stages))
        try:
            return [int(t) for t in s.split(",") if t.strip()]
        except ValueError as exc:
            raise ArgumentError(f"bad stage subset {spec!r}") from exc
    return [int(t) for t in spec]


def select_stages(fs: FeatureSet, stages: Sequence[int]) -> FeatureSet:
    stages = list(stages)
    if not stages:
        raise ArgumentError("stage list is empty")
    if any(b <= a for a, b in zip(stages, stages[1:])):
        raise ArgumentError(f"stage list {stages} must be strictly increasing")
    if stages[0] < 0 or stages[-1] >= len(fs.stage_dims):
        raise ArgumentError(f"stage list {stages} out of range for {len(fs.stage_dims)} stages")
    offsets = fs.stage_offsets()
    cols = np.concatenate([np.arange(*offsets[s]) for s in stages])
    return fs.with_data(fs.data[:, cols], [fs.stage_dims[s] for s in stages])


def _normalize_rows(x: np.ndarray, epsilon: float) -> np.ndarray:
    x64 = x.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x64, x64))
    return (x64 / np.maximum(norms, epsilon)[:, None]).astype(np.float32)


def l2_normalize(fs: FeatureSet, epsilon: float = 1e-12, per_stage: bool = False) -> FeatureSet:
    """Scale each row to unit Euclidean norm; rows with norm <= epsilon stay near zero.

    ``per_stage=True`` normalizes every stage segment separately instead of the
    concatenated vector.
    """
    if not epsilon > 0:
        raise ArgumentError("epsilon must be positive")
    if not per_stage:
        return fs.with_data(_normalize_rows(fs.data, epsilon))
    out = np.empty_like(fs.data)
    for lo, hi in fs.stage_offsets():
        out[:, lo:hi] = _normalize_rows(fs.data[:, lo:hi], epsilon)
    return fs.with_data(out)


def subsample(fs: FeatureSet, fraction: float, seed: int) -> FeatureSet:
    """Seeded draw of ceil(fraction*N) rows without replacement, kept in original order."""
    if not 0.0 < fraction <= 1.0:
        raise ArgumentError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return fs
    k = math.ceil(fraction * fs.n)
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(fs.n, size=k, replace=False))
    return fs.take(rows)


def preprocess(fs: FeatureSet, stages: Sequence[int] | None, l2: str = "concat", epsilon: float = 1e-12) -> FeatureSet:
    """Stage selection followed by the requested normalization (concat | per-stage | none)."""
    if stages is not None:
        fs = select_stages(fs, stages)
    if l2 == "concat":
        return l2_normalize(fs, epsilon)
    if l2 == "per-stage":
        return l2_normalize(fs, epsilon, per_stage=True)
    if l2 == "none":
        return fs
    raise ArgumentError(f"unknown l2 mode {l2!r}")


# --------------------------------------------------------------------------- #
# classifier head
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class ClassifierHead:
    """Frozen final linear layer: logits = x @ W.T + b."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ArgumentError(f"head shapes inconsistent: W {w.shape}, b {b.shape}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValidationError("classifier head has non-finite entries")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.in_dim:
            raise ArgumentError(f"head expects width {self.in_dim}, got {x.shape[1]}")
        return x @ self.weight.T + self.bias


def write_head(path: str | os.PathLike, head: ClassifierHead) -> None:
    """Stored as an FVEC with C rows and stage_dims [D_pen, 1]: weights then bias column."""
    table = np.concatenate([head.weight, head.bias[:, None]], axis=1)
    write_fvec(path, FeatureSet(data=table, stage_dims=(head.in_dim, 1), name="head"))


def read_head(path: str | os.PathLike) -> ClassifierHead:
    fs = read_fvec(path)
    if len(fs.stage_dims) != 2 or fs.stage_dims[1] != 1:
        raise FormatError(f"{path} is not a classifier-head FVEC (stage_dims {fs.stage_dims})")
    return ClassifierHead(weight=fs.data[:, :-1], bias=fs.data[:, -1])


# --------------------------------------------------------------------------- #
# manifest
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    role: str
    category: str = ""
    name: str = ""

    @property
    def label(self) -> str:
        return self.name or Path(self.path).stem


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    penultimate_stage: int
    head_path: str | None = None
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        roles = [e.role for e in self.entries]
        bad = [r for r in roles if r not in ROLES]
        if bad:
            raise ArgumentError(f"unknown manifest roles {bad}; allowed {list(ROLES)}")
        if roles.count("id_train") != 1:
            raise ArgumentError("manifest needs exactly one id_train entry")
        if "id_test" not in roles or "ood_test" not in roles:
            raise ArgumentError("manifest needs at least one id_test and one ood_test entry")
        if self.penultimate_stage < 0:
            raise ArgumentError("penultimate_stage must be >= 0")

    def by_role(self, role: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.role == role]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load(self, entry: ManifestEntry) -> FeatureSet:
        fs = read_fvec(self.resolve(entry.path))
        if self.penultimate_stage >= len(fs.stage_dims):
            raise ArgumentError(
                f"penultimate_stage {self.penultimate_stage} >= {len(fs.stage_dims)} stages in {entry.path}"
            )
        return FeatureSet(fs.data, fs.stage_dims, fs.logits, fs.labels, name=entry.label)

    def load_role(self, role: str) -> list[FeatureSet]:
        return [self.load(e) for e in self.by_role(role)]

    def load_head(self) -> ClassifierHead | None:
        return None if self.head_path is None else read_head(self.resolve(self.head_path))

    def to_json(self) -> str:
        doc = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "penultimate_stage": self.penultimate_stage,
            "head_path": self.head_path,
            "entries": [
                {"path": e.path, "role": e.role, "category": e.category, "name": e.label} for e in self.entries
            ],
        }
        return json.dumps(doc, indent=2) + "\n"


def write_manifest(path: str | os.PathLike, manifest: DatasetManifest) -> None:
    atomic_write_text(path, manifest.to_json())


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    version = doc.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise UnsupportedVersionError(f"manifest schema_version {version!r} not supported")
    try:
        entries = tuple(
            ManifestEntry(path=e["path"], role=e["role"], category=e.get("category", ""), name=e.get("name", ""))
            for e in doc["entries"]
        )
        return DatasetManifest(
            entries=entries,
            penultimate_stage=int(doc["penultimate_stage"]),
            head_path=doc.get("head_path"),
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest {path} missing field: {exc}") from exc
