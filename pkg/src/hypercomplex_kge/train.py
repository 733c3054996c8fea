"""KvsAll training loop and checkpoint I/O."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffkernels as dk
from .graphstore import TripleStore
from .models import ConvConfig, ModelConfigError, ModelParams, canonical_kind, forward, backward, init_params

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    d: int = 64
    model_kind: str = "QMult"
    norm_mode: str = "batch"
    n_filters: int = 16
    kernel_size: int = 3
    input_dropout: float = 0.3
    feature_dropout: float = 0.4
    hidden_dropout: float = 0.3
    embed_dropout: float = 0.2
    product_dropout: float = 0.2
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 500
    label_smoothing: float = 0.1
    seed: int = 1
    precision: int = 64
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.model_kind = canonical_kind(self.model_kind)
        if self.d < 1:
            raise ModelConfigError("d must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ModelConfigError("label_smoothing must lie in [0, 1)")
        if self.batch_size < 1 or (self.norm_mode == "batch" and self.batch_size < 2):
            raise ModelConfigError("batch_size must be >= 2 with batch normalization")
        if self.epochs < 0:
            raise ModelConfigError("epochs must be >= 0")
        if self.precision not in (32, 64):
            raise ModelConfigError("precision must be 32 or 64")
        if self.lr <= 0:
            raise ModelConfigError("lr must be positive")
        self.conv_config()

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def conv_config(self) -> ConvConfig:
        return ConvConfig(
            n_filters=self.n_filters,
            kernel_size=self.kernel_size,
            input_dropout=self.input_dropout,
            feature_dropout=self.feature_dropout,
            hidden_dropout=self.hidden_dropout,
        )

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ModelConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            ftype = type(getattr(cls, key))
            kwargs[key] = ftype(value) if not isinstance(value, ftype) else value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    seconds: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.loss:.10g}\t{self.seconds:.4f}"


def write_epoch_log(logs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for log in logs:
            fh.write(log.line() + "\n")


def read_epoch_log(path) -> list[EpochLog]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            e, loss, sec = line.rstrip("\n").split("\t")
            out.append(EpochLog(int(e), float(loss), float(sec)))
    return out


def make_batches(n_pairs: int, batch_size: int, rng, min_size: int = 1) -> list[np.ndarray]:
    """Shuffle pair indices into batches; a trailing batch below ``min_size`` joins the previous one."""
    order = rng.permutation(n_pairs)
    batches = [order[i : i + batch_size] for i in range(0, n_pairs, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < min_size:
        logger.debug("merging trailing batch of %d pairs into the previous batch", len(batches[-1]))
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def batch_step(params: ModelParams, store: TripleStore, pairs: np.ndarray, smoothing: float, rng):
    """Loss and gradients for one batch of ``(h, r)`` pairs in training mode."""
    y = store.kvsall_batch(pairs, smoothing)
    scores, cache = forward(params, pairs[:, 0], pairs[:, 1], train=True, rng=rng)
    loss, dscores = dk.bce_with_logits(scores, y)
    grads = backward(params, dscores.astype(scores.dtype, copy=False), cache)
    return loss, grads


def fit(store: TripleStore, config: TrainConfig, params: ModelParams | None = None, callback=None):
    """Train with KvsAll targets, sigmoid + BCE and Adam.

    ``callback(epoch, params, log)`` runs after every epoch; returning
    ``False`` stops training early.  Returns ``(params, logs)``.
    """
    if not store.reciprocal:
        logger.warning("training on a store without reciprocal relations: head prediction is untrained")
    if params is None:
        params = init_params(
            store.n_entities,
            store.n_relations,
            config.d,
            config.model_kind,
            config.norm_mode,
            config.conv_config(),
            seed=config.seed,
            dtype=config.dtype,
            bn_momentum=config.bn_momentum,
            embed_dropout=config.embed_dropout,
            product_dropout=config.product_dropout,
        )
    params.vocabulary_hash = store.vocabulary_hash()
    rng = np.random.default_rng(config.seed)
    adam = dk.AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    pairs = store.train_pairs()
    min_size = 2 if params.bn else 1
    logs = []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        total = 0.0
        for idx in make_batches(len(pairs), config.batch_size, rng, min_size):
            batch = pairs[idx]
            loss, grads = batch_step(params, store, batch, config.label_smoothing, rng)
            dk.adam_step(params.tensors, grads, adam)
            total += loss * len(batch)
        log = EpochLog(epoch, total / max(len(pairs), 1), time.perf_counter() - start)
        logs.append(log)
        logger.info("epoch %d loss %.6f (%.2fs)", epoch, log.loss, log.seconds)
        if callback is not None and callback(epoch, params, log) is False:
            break
    return params, logs


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"HCKGE\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<6sHI")


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Unknown magic bytes or format version."""


class TruncatedCheckpointError(CheckpointError):
    """The file ends before the declared payload."""


class VocabularyMismatchError(CheckpointError):
    """The checkpoint was trained on a different vocabulary."""


def save_checkpoint(params: ModelParams, path) -> None:
    """Write magic, version, a JSON header and an ``.npz`` payload."""
    arrays = {f"t/{k}": v for k, v in params.tensors.items()}
    for name, st in params.bn.items():
        arrays[f"bn/{name}/running_mean"] = st.running_mean
        arrays[f"bn/{name}/running_var"] = st.running_var
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    header = {
        "model_kind": params.model_kind,
        "norm_mode": params.norm_mode,
        "d": params.d,
        "conv": asdict(params.conv) if params.conv is not None else None,
        "bn_momentum": {k: st.momentum for k, st in params.bn.items()},
        "vocabulary_hash": params.vocabulary_hash,
        "embed_dropout": params.embed_dropout,
        "product_dropout": params.product_dropout,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(raw_header)))
        fh.write(raw_header)
        fh.write(payload)


def load_checkpoint(path, store: TripleStore | None = None) -> ModelParams:
    """Read a checkpoint; with ``store`` given, its vocabulary hash must match."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        if MAGIC.startswith(blob[: len(MAGIC)]):
            raise TruncatedCheckpointError(f"{path}: file too short for a header")
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic bytes)")
    magic, version, header_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {version}")
    start = _HEADER.size
    if len(blob) < start + header_len:
        raise TruncatedCheckpointError(f"{path}: header truncated")
    header = json.loads(blob[start : start + header_len].decode("utf-8"))
    payload = blob[start + header_len :]
    if len(payload) < header["payload_bytes"]:
        raise TruncatedCheckpointError(f"{path}: payload truncated ({len(payload)} of {header['payload_bytes']} bytes)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    if store is not None and header["vocabulary_hash"] != store.vocabulary_hash():
        raise VocabularyMismatchError(f"{path}: checkpoint vocabulary does not match the dataset")

    with np.load(io.BytesIO(payload)) as npz:
        arrays = {k: npz[k] for k in npz.files}
    tensors = {k[2:]: v for k, v in arrays.items() if k.startswith("t/")}
    bn = {}
    for name, momentum in header["bn_momentum"].items():
        bn[name] = dk.BatchNormState(
            gamma=tensors[f"{name}.gamma"],
            beta=tensors[f"{name}.beta"],
            running_mean=arrays[f"bn/{name}/running_mean"],
            running_var=arrays[f"bn/{name}/running_var"],
            momentum=momentum,
        )
    conv = ConvConfig(**header["conv"]) if header["conv"] is not None else None
    return ModelParams(
        header["model_kind"],
        header["norm_mode"],
        int(header["d"]),
        tensors,
        bn,
        conv,
        header["vocabulary_hash"],
        header["embed_dropout"],
        header["product_dropout"],
    )
