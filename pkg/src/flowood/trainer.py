"""Maximum-likelihood training of a FlowModel with Adam and validation-AUROC selection,
plus the NFCK checkpoint format.

NFCK layout (little-endian)::

    b"NFCK"  u16 version
    u32 D  u16 K  u16 H  u32 hidden[H]  f64 clamp  u8 actnorm_initialized
    u8 masks[K*D]
    u64 P  f32 params[P]
    u32 meta_len  meta JSON (utf-8)
    sha256 over every preceding byte (32 bytes)
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import (
    ArgumentError,
    CorruptionError,
    FormatError,
    NumericalError,
    TrainingDivergedError,
    UnsupportedVersionError,
)
from .features import FeatureSet, atomic_write_bytes, subsample
from .flow import FlowModel
from .metrics import auroc

log = logging.getLogger(__name__)

CKPT_MAGIC = b"NFCK"
CKPT_VERSION = 1
_DIGEST = 32


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clamp: float = 2.0
    data_fraction: float = 1.0
    eval_every: int = 1
    n_blocks: int = 4
    hidden: tuple[int, ...] = (512, 1024, 512)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ArgumentError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ArgumentError("eval_every must be >= 1")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ArgumentError("data_fraction must be in (0, 1]")
        if not self.clamp > 0:
            raise ArgumentError("clamp must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class Adam:
    """Adam with bias-corrected moments kept in float64."""

    def __init__(self, size: int, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size, dtype=np.float64)
        self.v = np.zeros(size, dtype=np.float64)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        kernels.adam_update(params, grad, self.m, self.v, self.lr, self.beta1, self.beta2, self.eps, bc1, bc2)


def nll_loss(model: FlowModel, batch: np.ndarray) -> float:
    """Mean negative log-likelihood in nats per sample."""
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ArgumentError("batch must be a non-empty 2-D array")
    return float(-np.mean(model.log_prob(batch)))


def param_gradients(model: FlowModel, batch: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradient of ``nll_loss`` for every named parameter."""
    _, flat = model.nll_and_grad(batch)
    return model.named_views(flat)


@dataclass
class Checkpoint:
    model: FlowModel
    meta: dict = field(default_factory=dict)
    snapshots: dict[int, Checkpoint] = field(default_factory=dict, repr=False)

    @property
    def best_epoch(self) -> int | None:
        return self.meta.get("best_epoch")

    @property
    def best_val_auroc(self) -> float | None:
        return self.meta.get("best_val_auroc")


def train(
    id_train: FeatureSet | np.ndarray,
    id_val: FeatureSet | np.ndarray,
    ood_val: FeatureSet | np.ndarray,
    config: TrainConfig = TrainConfig(),
    on_epoch: Callable[[dict], None] | None = None,
    snapshot_epochs: Sequence[int] = (),
) -> Checkpoint:
    """Fit a flow on ``id_train`` and keep the epoch with the best validation AUROC.

    Validation AUROC scores ``id_val`` against ``ood_val`` by log-likelihood;
    ties keep the earliest epoch. Fully deterministic for a fixed ``config.seed``.

    ``snapshot_epochs`` additionally records, in ``Checkpoint.snapshots``, the
    checkpoint a run with ``epochs=E`` would have returned for each listed E.
    Since the first E epochs of a longer run are identical, one run serves an
    entire epoch sweep.
    """
    seeds = np.random.SeedSequence(config.seed).generate_state(3)
    if isinstance(id_train, FeatureSet):
        id_train = subsample(id_train, config.data_fraction, int(seeds[0])).data
    elif config.data_fraction != 1.0:
        raise ArgumentError("data_fraction needs a FeatureSet")
    x = np.ascontiguousarray(id_train, dtype=np.float32)
    xv_id = np.asarray(id_val.data if isinstance(id_val, FeatureSet) else id_val, dtype=np.float32)
    xv_ood = np.asarray(ood_val.data if isinstance(ood_val, FeatureSet) else ood_val, dtype=np.float32)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ArgumentError("training set is empty")
    if xv_id.shape[0] == 0 or xv_ood.shape[0] == 0:
        raise ArgumentError("id_val and ood_val must be non-empty")
    if not (x.shape[1] == xv_id.shape[1] == xv_ood.shape[1]):
        raise ArgumentError(f"width mismatch: train {x.shape[1]}, id_val {xv_id.shape[1]}, ood_val {xv_ood.shape[1]}")

    n, dim = x.shape
    model = FlowModel.create(dim, config.n_blocks, config.hidden, config.clamp, seed=int(seeds[1]))
    shuffle_rng = np.random.default_rng(int(seeds[2]))
    opt = Adam(model.params.size, config.learning_rate, config.beta1, config.beta2, config.eps)
    grad = np.empty_like(model.params)

    snaps = set(int(e) for e in snapshot_epochs)
    if snaps and not all(1 <= e <= config.epochs for e in snaps):
        raise ArgumentError(f"snapshot epochs must lie in [1, {config.epochs}]")
    best_params, best_auc, best_epoch = None, -np.inf, None
    history = []
    snapshots = {}
    for epoch in range(1, config.epochs + 1):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            batch = x[perm[lo : lo + config.batch_size]]
            if not model.actnorm_initialized:
                model.initialize_actnorm(batch)
            loss, _ = model.nll_and_grad(batch, grad)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            opt.step(model.params, grad)
            total += loss * batch.shape[0]
        record = {"epoch": epoch, "train_nll": total / n}
        if epoch % config.eval_every == 0 or epoch == config.epochs or epoch in snaps:
            s_id, s_ood = model.log_prob(xv_id), model.log_prob(xv_ood)
            if not (np.isfinite(s_id).all() and np.isfinite(s_ood).all()):
                raise NumericalError(f"non-finite validation log-likelihood at epoch {epoch}")
            auc = auroc(s_id, s_ood)
            record["val_auroc"] = auc
            if auc > best_auc:
                best_auc, best_epoch, best_params = auc, epoch, model.params.copy()
        history.append(record)
        log.info("epoch %d nll %.4f%s", epoch, record["train_nll"],
                 f" val_auroc {record['val_auroc']:.4f}" if "val_auroc" in record else "")
        if on_epoch is not None:
            on_epoch(record)
        if epoch in snaps:
            snap = model.copy()
            snap.params[...] = best_params
            cfg = TrainConfig.from_dict({**config.to_dict(), "epochs": epoch})
            snapshots[epoch] = Checkpoint(snap, _meta(cfg, best_epoch, best_auc, n, list(history)))

    model.params[...] = best_params
    return Checkpoint(model, _meta(config, best_epoch, best_auc, n, history), snapshots)


def _meta(config: TrainConfig, best_epoch, best_auc, n, history) -> dict:
    return {
        "config": config.to_dict(),
        "best_epoch": best_epoch,
        "best_val_auroc": best_auc,
        "n_train": n,
        "history": history,
    }


# --------------------------------------------------------------------------- #
# checkpoint I/O
# --------------------------------------------------------------------------- #


def encode_checkpoint(model: FlowModel, meta: dict | None = None) -> bytes:
    k, d = model.masks.shape
    params = model.params.astype("<f4")
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(
        [
            CKPT_MAGIC,
            struct.pack("<HIHH", CKPT_VERSION, d, k, len(model.hidden)),
            struct.pack(f"<{len(model.hidden)}I", *model.hidden),
            struct.pack("<dB", model.clamp, int(model.actnorm_initialized)),
            model.masks.astype(np.uint8).tobytes(),
            struct.pack("<Q", params.size),
            params.tobytes(),
            struct.pack("<I", len(meta_bytes)),
            meta_bytes,
        ]
    )
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path: str | os.PathLike, model: FlowModel, meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(model, meta))


def parse_checkpoint_header(buf: bytes) -> dict:
    if len(buf) < 6 or buf[:4] != CKPT_MAGIC:
        raise FormatError("not an NFCK checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} not supported (expected {CKPT_VERSION})")
    try:
        d, k, h = struct.unpack_from("<IHH", buf, 6)
        pos = 14
        hidden = struct.unpack_from(f"<{h}I", buf, pos)
        pos += 4 * h
        clamp, init = struct.unpack_from("<dB", buf, pos)
        pos += 9
        masks = np.frombuffer(buf, dtype=np.uint8, count=k * d, offset=pos).reshape(k, d).astype(bool)
        pos += k * d
        (n_params,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
    except (struct.error, ValueError) as exc:
        raise CorruptionError(f"checkpoint header truncated: {exc}") from exc
    return {
        "version": version,
        "dim": d,
        "n_blocks": k,
        "hidden": list(hidden),
        "clamp": clamp,
        "actnorm_initialized": bool(init),
        "masks": masks,
        "n_params": n_params,
        "payload_offset": pos,
    }


def decode_checkpoint(buf: bytes) -> Checkpoint:
    head = parse_checkpoint_header(buf)
    if len(buf) < _DIGEST or hashlib.sha256(buf[:-_DIGEST]).digest() != buf[-_DIGEST:]:
        raise CorruptionError("checkpoint checksum mismatch (truncated or modified file)")
    body = buf[:-_DIGEST]
    pos = head["payload_offset"]
    n_params = head["n_params"]
    try:
        params = np.frombuffer(body, dtype="<f4", count=n_params, offset=pos).astype(np.float32)
        pos += 4 * n_params
        (meta_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
    except (ValueError, struct.error) as exc:
        raise CorruptionError(f"checkpoint payload malformed: {exc}") from exc
    if pos != len(body):
        raise CorruptionError("trailing bytes after checkpoint metadata")
    model = FlowModel(
        head["dim"],
        head["masks"],
        head["hidden"],
        head["clamp"],
        params=params,
        actnorm_initialized=True,
    )
    return Checkpoint(model, meta)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return decode_checkpoint(buf)


def checkpoint_roundtrip(path: str | os.PathLike, model: FlowModel, meta: dict | None = None) -> Checkpoint:
    save_checkpoint(path, model, meta)
    return load_checkpoint(path)
