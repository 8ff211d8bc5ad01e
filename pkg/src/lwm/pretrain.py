"""Self-supervised masked-channel pre-training, validation, and checkpoints.

Determinism contract: (master seed, data, config) fully determine the
parameter trajectory. The master seed fans out into distinct streams for the
train/validation split, initialization, per-sample masks (fresh every
epoch), validation masks (drawn once), shuffling, and dropout.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .channels import ChannelMatrix, normalize_channels
from .errors import (
    ConfigMismatchError,
    ContractError,
    MagicError,
    TruncatedFileError,
    VersionError,
)
from .model import LwmParameters, ModelConfig, forward_pretrain, reconstruct_targets
from .optim import AdamState, adam_step
from .patches import MaskSpec, PatchSequence, apply_mask, draw_mask, patchify
from .rng import substream
from .tensor import Tensor, backward

CHECKPOINT_MAGIC = b"LWMW"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimization hyperparameters; defaults are the reference setup."""

    lr0: float = 1e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 10
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    epochs: int = 50
    num_masked: int = 9          # real-part patches selected per sample
    master_seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if min(self.lr0, self.lr_decay, self.eps) <= 0 or self.batch_size < 1:
            raise ContractError("train config values must be positive")
        if self.num_masked < 1 or self.epochs < 0:
            raise ContractError("num_masked must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decayed learning rate: lr0 * decay^(epoch // every)."""
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_nmse: float


@dataclass
class PreparedData:
    """Patchified, normalized splits plus the fixed validation masks."""

    train_patches: np.ndarray            # (N_train, P, L)
    val_patches: np.ndarray              # (N_val, P, L)
    norm_constant: float
    val_masked: np.ndarray | None = None      # (N_val, P, L)
    val_target_idx: np.ndarray | None = None  # (N_val, n)
    val_target_vals: np.ndarray | None = None


def _mask_sample(patches: np.ndarray, num_masked: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw and apply one mask; returns (masked, indices, targets) arrays."""
    seq = PatchSequence(patches)
    spec = draw_mask(seq.num_patches, None, rng, count=num_masked)
    masked, targets = apply_mask(seq, spec, rng)
    idx = np.array(sorted(targets), dtype=np.intp)
    vals = np.stack([targets[i] for i in sorted(targets)])
    return masked.patches, idx, vals


def prepare_data(channels: list[ChannelMatrix], model_cfg: ModelConfig,
                 train_cfg: TrainConfig) -> PreparedData:
    """Shuffle, split, normalize on the training split, and patchify."""
    if not channels:
        raise ContractError("cannot train on an empty dataset")
    n = len(channels)
    order = substream(train_cfg.master_seed, "split").permutation(n)
    n_val = int(round(train_cfg.val_fraction * n))
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if len(train_idx) == 0:
        raise ContractError("validation fraction leaves no training data")
    train_channels = [channels[i] for i in train_idx]
    _, constant = normalize_channels(train_channels)

    def patch_stack(idx):
        rows = [patchify(channels[i], model_cfg.num_patches).patches for i in idx]
        return np.stack(rows) * constant if rows else np.zeros(
            (0, model_cfg.num_patches, model_cfg.patch_len))

    prepared = PreparedData(
        train_patches=patch_stack(train_idx),
        val_patches=patch_stack(val_idx),
        norm_constant=constant,
    )
    if n_val:
        masked, idxs, vals = [], [], []
        for i in range(n_val):
            rng = substream(train_cfg.master_seed, "valmask", i)
            m, ti, tv = _mask_sample(prepared.val_patches[i], train_cfg.num_masked, rng)
            masked.append(m)
            idxs.append(ti)
            vals.append(tv)
        prepared.val_masked = np.stack(masked)
        prepared.val_target_idx = np.stack(idxs)
        prepared.val_target_vals = np.stack(vals)
    return prepared


def train_epoch(data: PreparedData, params: LwmParameters, opt: AdamState,
                model_cfg: ModelConfig, train_cfg: TrainConfig, epoch: int) -> float:
    """One pass over the training split with fresh masks; returns mean loss."""
    n = data.train_patches.shape[0]
    if n == 0:
        raise ContractError("training split is empty")
    order = substream(train_cfg.master_seed, "shuffle", epoch).permutation(n)
    opt.lr = lr_at(epoch, train_cfg)
    tensors = params.all_tensors()
    total_loss = 0.0
    total_targets = 0
    for start in range(0, n, train_cfg.batch_size):
        batch_ids = order[start:start + train_cfg.batch_size]
        masked, idxs, vals = [], [], []
        for ds_index in batch_ids:
            rng = substream(train_cfg.master_seed, "mask", epoch, int(ds_index))
            m, ti, tv = _mask_sample(data.train_patches[ds_index],
                                     train_cfg.num_masked, rng)
            masked.append(m)
            idxs.append(ti)
            vals.append(tv)
        drop_rng = substream(train_cfg.master_seed, "dropout", epoch, start)
        loss = forward_pretrain(np.stack(masked), np.stack(idxs), np.stack(vals),
                                params, model_cfg, training=True, rng=drop_rng)
        backward(loss)
        adam_step(tensors, opt)
        count = len(batch_ids) * idxs[0].shape[0]
        total_loss += loss.item() * count
        total_targets += count
    return total_loss / total_targets


def validate(data: PreparedData, params: LwmParameters, model_cfg: ModelConfig,
             batch_size: int = 256) -> tuple[float, float]:
    """Evaluation-mode reconstruction on the fixed validation masks.

    Returns (mcm_loss, nmse) where nmse is total squared error over total
    target energy.
    """
    if data.val_masked is None or data.val_masked.shape[0] == 0:
        raise ContractError("no validation split prepared")
    n = data.val_masked.shape[0]
    sq_err = 0.0
    energy = 0.0
    count = 0
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        recon, targets = reconstruct_targets(
            data.val_masked[sl], data.val_target_idx[sl], data.val_target_vals[sl],
            params, model_cfg, training=False)
        diff = recon.data - targets.data
        sq_err += float(np.sum(diff * diff))
        energy += float(np.sum(targets.data * targets.data))
        count += targets.data.shape[0] * targets.data.shape[1]
    return sq_err / count, sq_err / energy


def baseline_nmse(data: PreparedData) -> float:
    """NMSE of predicting every masked patch as the mean of the visible patches.

    Model-free reference: computed directly from the masked validation
    arrays, never through the network.
    """
    if data.val_masked is None or data.val_masked.shape[0] == 0:
        raise ContractError("no validation split prepared")
    sq_err = 0.0
    energy = 0.0
    p = data.val_masked.shape[1]
    for i in range(data.val_masked.shape[0]):
        idx = data.val_target_idx[i]
        visible = np.setdiff1d(np.arange(p), idx)
        mean_patch = data.val_masked[i, visible].mean(axis=0)
        diff = data.val_target_vals[i] - mean_patch
        sq_err += float(np.sum(diff * diff))
        energy += float(np.sum(data.val_target_vals[i] ** 2))
    return sq_err / energy


@dataclass
class PretrainResult:
    params: LwmParameters
    opt: AdamState
    history: list
    norm_constant: float
    baseline: float


def run_pretraining(channels: list[ChannelMatrix], model_cfg: ModelConfig,
                    train_cfg: TrainConfig, progress=None) -> PretrainResult:
    """Full pre-training driver: prepare, train epochs, validate each epoch."""
    data = prepare_data(channels, model_cfg, train_cfg)
    params = LwmParameters.init(model_cfg, substream(train_cfg.master_seed, "init"))
    opt = AdamState.for_params(params.all_tensors(), lr=train_cfg.lr0,
                               beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                               eps=train_cfg.eps, weight_decay=train_cfg.weight_decay)
    baseline = baseline_nmse(data) if data.val_masked is not None else math.nan
    history: list[EpochStats] = []
    for epoch in range(train_cfg.epochs):
        train_loss = train_epoch(data, params, opt, model_cfg, train_cfg, epoch)
        if data.val_masked is not None:
            val_loss, val_nmse = validate(data, params, model_cfg)
        else:
            val_loss = val_nmse = math.nan
        stats = EpochStats(epoch=epoch, lr=lr_at(epoch, train_cfg),
                           train_loss=train_loss, val_loss=val_loss, val_nmse=val_nmse)
        history.append(stats)
        if progress is not None:
            progress(stats)
    return PretrainResult(params=params, opt=opt, history=history,
                          norm_constant=data.norm_constant, baseline=baseline)


# ---------------------------------------------------------------------------
# checkpoint file format
#
# magic "LWMW" | version u16 | config blob length u32 + UTF-8 JSON
# (model + train + normalization constant + epoch) | tensor count u32 |
# per tensor: name length u16 + UTF-8 name + rank u8 + dims u32[rank] +
# row-major little-endian f32 payload.


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    norm_constant: float
    params: LwmParameters
    epoch: int = 0
    val_history: list = field(default_factory=list)
    optimizer: AdamState | None = None


def _config_blob(ckpt: Checkpoint) -> bytes:
    cfg = {
        "model": ckpt.model_cfg.to_dict(),
        "train": ckpt.train_cfg.to_dict(),
        "norm_constant": ckpt.norm_constant,
        "epoch": ckpt.epoch,
        "val_history": list(ckpt.val_history),
        "optimizer_step": ckpt.optimizer.step if ckpt.optimizer else None,
    }
    return json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _checkpoint_tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = [(name, t.data) for name, t in ckpt.params.named_tensors()]
    if ckpt.optimizer is not None:
        names = [name for name, _ in ckpt.params.named_tensors()]
        for name, m in zip(names, ckpt.optimizer.m):
            entries.append((f"adam.m.{name}", m))
        for name, v in zip(names, ckpt.optimizer.v):
            entries.append((f"adam.v.{name}", v))
    return entries


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Serialize to the binary format; writes a temp file then renames."""
    blob = _config_blob(ckpt)
    entries = _checkpoint_tensors(ckpt)
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION),
             struct.pack("<I", len(blob)), blob, struct.pack("<I", len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise TruncatedFileError(
                f"checkpoint ends at byte {len(self.blob)}, needed {self.off + n}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect_model: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; optionally enforce an expected model configuration."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise MagicError("not a checkpoint file (bad magic)")
    (version,) = reader.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (blob_len,) = reader.unpack("<I")
    cfg = json.loads(reader.take(blob_len).decode("utf-8"))
    model_cfg = ModelConfig.from_dict(cfg["model"])
    train_cfg = TrainConfig.from_dict(cfg["train"])
    if expect_model is not None and model_cfg != expect_model:
        raise ConfigMismatchError(
            f"checkpoint model config {model_cfg} != expected {expect_model}")
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I") if rank else ()
        n_items = int(np.prod(dims)) if dims else 1
        payload = reader.take(n_items * 4)
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
    if reader.off != len(reader.blob):
        raise TruncatedFileError(
            f"{len(reader.blob) - reader.off} unexpected trailing bytes")

    params = LwmParameters.init(model_cfg, substream(0, "placeholder"))
    for name, t in params.named_tensors():
        if name not in tensors:
            raise ConfigMismatchError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != t.data.shape:
            raise ConfigMismatchError(
                f"tensor {name!r} has shape {tensors[name].shape}, "
                f"model config implies {t.data.shape}")
        t.data = tensors[name].copy()

    optimizer = None
    if cfg.get("optimizer_step") is not None:
        optimizer = AdamState.for_params(
            params.all_tensors(), lr=train_cfg.lr0, beta1=train_cfg.beta1,
            beta2=train_cfg.beta2, eps=train_cfg.eps,
            weight_decay=train_cfg.weight_decay)
        optimizer.step = int(cfg["optimizer_step"])
        for i, (name, _) in enumerate(params.named_tensors()):
            m_name, v_name = f"adam.m.{name}", f"adam.v.{name}"
            if m_name not in tensors or v_name not in tensors:
                raise ConfigMismatchError(f"checkpoint optimizer state missing {name!r}")
            optimizer.m[i] = tensors[m_name].copy()
            optimizer.v[i] = tensors[v_name].copy()

    return Checkpoint(model_cfg=model_cfg, train_cfg=train_cfg,
                      norm_constant=float(cfg["norm_constant"]), params=params,
                      epoch=int(cfg["epoch"]), val_history=list(cfg["val_history"]),
                      optimizer=optimizer)
