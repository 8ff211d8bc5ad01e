"""Feature extraction, downstream heads, fine-tuning, and the benchmark grid.

Feature kinds: RAW concatenates the flattened channel planes, CLS is row 0
of the encoder output, CHANNEL_EMB the remaining rows flattened. Dense heads
handle line-of-sight classification, the residual CNN handles beam
prediction. The benchmark sweeps feature kind x train fraction (x codebook
size for beams) x seeds and reports macro-F1 per cell.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .channels import ChannelMatrix, DftCodebook, add_noise, label_beams
from .errors import ConfigMismatchError, ContractError, ShapeError
from .heads import (
    CnnHead,
    CnnHeadConfig,
    FitResult,
    MlpHead,
    MlpHeadConfig,
    fit_classifier,
    predict_classes,
)
from .model import embed_inputs, encode, encoder_block, forward_embed
from .patches import patchify
from .pretrain import Checkpoint
from .rng import substream
from .tensor import Tensor

DEFAULT_HEAD_EPOCHS = 100
DEFAULT_HEAD_LR = 1e-3
DEFAULT_NOISE_SNR_DB = 5.0


class FeatureKind(enum.Enum):
    RAW = "raw"
    CLS = "cls"
    CHANNEL_EMB = "channel"


class LabelKind(enum.Enum):
    LOS = "los"
    BEAM = "beam"


# split conventions: (train, val, test) fractions per task; the LoS protocol
# has no tuning split, so its heads skip best-epoch selection
LOS_SPLIT = (0.8, 0.0, 0.2)
BEAM_SPLIT = (0.7, 0.2, 0.1)


@dataclass
class FeatureSet:
    kind: FeatureKind
    matrix: np.ndarray          # (N, dim)
    labels: np.ndarray          # (N,), -1 where missing
    label_kind: LabelKind
    cnn_shape: tuple[int, int] | None = None  # (T, C) layout for the CNN head


def _channel_labels(channels: list[ChannelMatrix], label_kind: LabelKind) -> np.ndarray:
    if label_kind is LabelKind.LOS:
        return np.array([-1 if ch.los is None else int(ch.los) for ch in channels])
    return np.array([-1 if ch.beam is None else int(ch.beam) for ch in channels])


def extract_features(channels: list[ChannelMatrix], checkpoint: Checkpoint,
                     kind: FeatureKind, label_kind: LabelKind = LabelKind.LOS,
                     snr_db: float | None = None, noise_seed: int = 0) -> FeatureSet:
    """Build the feature matrix for a channel list.

    ``snr_db`` corrupts the raw channels before any processing, mirroring
    inference from imperfect channel estimates. Embedding kinds apply the
    checkpoint's normalization constant before the forward pass.
    """
    if not channels:
        raise ContractError("extract_features needs at least one channel")
    cfg = checkpoint.model_cfg
    a, s = channels[0].antennas, channels[0].subcarriers
    if kind is not FeatureKind.RAW and 2 * a * s != cfg.num_patches * cfg.patch_len:
        raise ConfigMismatchError(
            f"channels of shape {a}x{s} do not match the checkpoint's "
            f"{cfg.num_patches} patches of length {cfg.patch_len}")
    if snr_db is not None:
        channels = [add_noise(ch, snr_db, substream(noise_seed, "feature-noise", i))
                    for i, ch in enumerate(channels)]
    labels = _channel_labels(channels, label_kind)

    if kind is FeatureKind.RAW:
        rows = [np.concatenate([ch.real.ravel(), ch.imag.ravel()]) for ch in channels]
        return FeatureSet(kind, np.stack(rows), labels, label_kind, cnn_shape=(a * s, 2))

    rows = []
    for ch in channels:
        out = forward_embed(ch.scaled(checkpoint.norm_constant), checkpoint.params, cfg)
        rows.append(out.cls.copy() if kind is FeatureKind.CLS else out.channel.ravel())
    if kind is FeatureKind.CLS:
        shape = (cfg.embed_dim, 1)
    else:
        shape = (cfg.num_patches, cfg.embed_dim)
    return FeatureSet(kind, np.stack(rows), labels, label_kind, cnn_shape=shape)


def macro_f1(pred: np.ndarray, truth: np.ndarray, classes: int) -> float:
    """Unweighted mean over classes of 2*TP / (2*TP + FP + FN).

    A class with no support and no predictions contributes 0.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction/truth length mismatch: {pred.shape} vs {truth.shape}")
    total = 0.0
    for c in range(classes):
        tp = int(np.sum((pred == c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        fn = int(np.sum((pred != c) & (truth == c)))
        denom = 2 * tp + fp + fn
        total += (2 * tp / denom) if denom else 0.0
    return total / classes


def stratified_split(labels: np.ndarray, fractions: tuple[float, float, float],
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class shuffled index split into (train, val, test) pools.

    When the fractions form a partition, each class's remainder lands in the
    test pool so no sample is dropped.
    """
    train_f, val_f, test_f = fractions
    if min(fractions) < 0 or train_f + val_f + test_f > 1.0 + 1e-9:
        raise ContractError(f"split fractions {fractions} exceed the dataset")
    is_partition = train_f + val_f + test_f > 1.0 - 1e-9
    train, val, test = [], [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        n_train = int(round(train_f * n))
        n_val = int(round(val_f * n))
        n_test = n - n_train - n_val if is_partition else int(round(test_f * n))
        n_test = max(n_test, 0)
        train.extend(idx[:n_train])
        val.extend(idx[n_train:n_train + n_val])
        test.extend(idx[n_train + n_val:n_train + n_val + n_test])
    return (np.sort(np.array(train, dtype=np.intp)),
            np.sort(np.array(val, dtype=np.intp)),
            np.sort(np.array(test, dtype=np.intp)))


def _subsample(idx: np.ndarray, labels: np.ndarray, train_fraction,
               rng: np.random.Generator) -> np.ndarray:
    """Stratified subset of a training pool: fraction in (0,1] or absolute count.

    Largest-remainder quotas keep the class mix and hit the requested count
    exactly.
    """
    if isinstance(train_fraction, (int, np.integer)) and train_fraction > 1:
        want = int(train_fraction)
        if want > len(idx):
            raise ContractError(f"requested {want} training samples, pool has {len(idx)}")
    else:
        frac = float(train_fraction)
        if not 0.0 < frac <= 1.0:
            raise ContractError(f"train fraction must lie in (0, 1], got {train_fraction}")
        if frac == 1.0:
            return idx
        want = max(2, int(round(frac * len(idx))))
    pools = []
    for c in np.unique(labels[idx]):
        pool = idx[labels[idx] == c]
        pools.append(pool[rng.permutation(len(pool))])
    quotas = [len(p) * want / len(idx) for p in pools]
    takes = [min(int(q), len(p)) for q, p in zip(quotas, pools)]
    remainders = sorted(range(len(pools)), key=lambda i: quotas[i] - takes[i], reverse=True)
    i = 0
    while sum(takes) < want:
        c = remainders[i % len(pools)]
        if takes[c] < len(pools[c]):
            takes[c] += 1
        i += 1
    picked = np.concatenate([p[:t] for p, t in zip(pools, takes)])
    return np.sort(picked.astype(np.intp))


@dataclass
class HeadResult:
    f1: float
    n_train: int
    fit: FitResult
    pred: np.ndarray
    truth: np.ndarray
    head: object = None


def _reshape_for_cnn(features: FeatureSet, x: np.ndarray) -> np.ndarray:
    if features.cnn_shape is None:
        raise ContractError("feature set carries no CNN layout")
    t, c = features.cnn_shape
    if features.kind is FeatureKind.RAW:
        # planes were concatenated [real, imag]; stack them as 2 channels
        return np.stack([x[:, :t], x[:, t:]], axis=2)
    return x.reshape(x.shape[0], t, c)


def train_head(features: FeatureSet, head_cfg, split: tuple[float, float, float],
               seed: int, train_fraction=1.0, epochs: int = DEFAULT_HEAD_EPOCHS,
               lr: float = DEFAULT_HEAD_LR, batch_size: int = 32,
               num_classes: int | None = None,
               shuffle_labels: bool = False) -> HeadResult:
    """Stratified split, head training, macro-F1 on the held-out test split.

    ``shuffle_labels`` permutes the training labels (the permutation-null
    reference). A dense-head config trains on flat features, a CNN config on
    the feature set's sequence layout.
    """
    labels = features.labels
    if np.any(labels < 0):
        raise ContractError("feature set has missing labels")
    train_idx, val_idx, test_idx = stratified_split(labels, split, substream(seed, "head-split"))
    train_idx = _subsample(train_idx, labels, train_fraction, substream(seed, "head-subsample"))
    if len(np.unique(labels[train_idx])) < 2:
        raise ContractError("training split must contain at least 2 classes")
    classes = int(labels.max()) + 1 if num_classes is None else num_classes

    y_train = labels[train_idx].copy()
    if shuffle_labels:
        y_train = y_train[substream(seed, "label-shuffle").permutation(len(y_train))]

    if isinstance(head_cfg, CnnHeadConfig):
        head_cfg = replace(head_cfg, classes=classes)
        x_all = _reshape_for_cnn(features, features.matrix)
        head = CnnHead(head_cfg, in_channels=x_all.shape[2], seq_len=x_all.shape[1],
                       rng=substream(seed, "head-init"))
    else:
        head_cfg = replace(head_cfg, classes=classes)
        x_all = features.matrix
        head = MlpHead(head_cfg, in_dim=x_all.shape[1], rng=substream(seed, "head-init"))

    x_val = x_all[val_idx] if len(val_idx) else None
    y_val = labels[val_idx] if len(val_idx) else None
    fit = fit_classifier(head, x_all[train_idx], y_train, x_val, y_val,
                         epochs=epochs, lr=lr, batch_size=batch_size, seed=seed)
    pred = predict_classes(head, x_all[test_idx])
    truth = labels[test_idx]
    return HeadResult(f1=macro_f1(pred, truth, classes), n_train=len(train_idx),
                      fit=fit, pred=pred, truth=truth, head=head)


@dataclass
class FinetuneResult:
    f1: float
    n_train: int
    params: object
    head: object
    fit: FitResult


def _prefix_embeddings(patch_rows: np.ndarray, params, cfg, num_prefix_layers: int,
                       batch_size: int = 128) -> np.ndarray:
    """Summary patch + embedding + the first blocks, inference mode, no graph."""
    outs = []
    for start in range(0, patch_rows.shape[0], batch_size):
        block = Tensor(patch_rows[start:start + batch_size])
        x = T.prepend_row(Tensor(params.cls_patch.data), block)
        x = embed_inputs(x, params, cfg, training=False)
        for li in range(num_prefix_layers):
            x = encoder_block(x, params.layers[li], cfg, training=False)
        outs.append(x.data)
    return np.concatenate(outs, axis=0)


def finetune_last_k(checkpoint: Checkpoint, k: int, channels: list[ChannelMatrix],
                    head_cfg: MlpHeadConfig, seed: int,
                    split: tuple[float, float, float] = LOS_SPLIT,
                    train_fraction=1.0, epochs: int = DEFAULT_HEAD_EPOCHS,
                    lr: float = DEFAULT_HEAD_LR, batch_size: int = 32,
                    label_kind: LabelKind = LabelKind.LOS) -> FinetuneResult:
    """Unfreeze the last ``k`` encoder blocks jointly with a dense head.

    The frozen prefix (embeddings plus the first E-k blocks) runs once in
    inference mode as a fixed feature extractor; only the unfrozen suffix
    and the head see dropout and weight updates, so every earlier tensor
    stays bit-identical. ``k = 0`` degenerates to training a head on frozen
    summary features.
    """
    cfg = checkpoint.model_cfg
    if not 0 <= k <= cfg.num_layers:
        raise ContractError(f"k must lie in [0, {cfg.num_layers}], got {k}")
    if k == 0:
        feats = extract_features(channels, checkpoint, FeatureKind.CLS, label_kind)
        res = train_head(feats, head_cfg, split, seed, train_fraction, epochs, lr, batch_size)
        return FinetuneResult(f1=res.f1, n_train=res.n_train,
                              params=checkpoint.params, head=res.head, fit=res.fit)

    labels = _channel_labels(channels, label_kind)
    if np.any(labels < 0):
        raise ContractError("fine-tuning needs labeled channels")
    classes = int(labels.max()) + 1
    params = checkpoint.params.copy()
    boundary = cfg.num_layers - k
    suffix_params = []
    for name, t in params.named_tensors():
        layer_id = int(name.split(".")[1]) if name.startswith("layer.") else -1
        if layer_id >= boundary:
            t.requires_grad = True
            suffix_params.append(t)
        else:
            t.requires_grad = False

    patch_rows = np.stack([
        patchify(ch.scaled(checkpoint.norm_constant), cfg.num_patches).patches
        for ch in channels])
    prefix = _prefix_embeddings(patch_rows, params, cfg, boundary)

    train_idx, val_idx, test_idx = stratified_split(labels, split, substream(seed, "head-split"))
    train_idx = _subsample(train_idx, labels, train_fraction, substream(seed, "head-subsample"))
    if len(np.unique(labels[train_idx])) < 2:
        raise ContractError("training split must contain at least 2 classes")

    head = MlpHead(replace(head_cfg, classes=classes), in_dim=cfg.embed_dim,
                   rng=substream(seed, "head-init"))

    def forward_fn(arr, training, rng):
        x = Tensor(arr)
        x = encode(x, params, cfg, training, rng, start_layer=boundary)
        cls_rows = T.gather_rows(x, np.zeros((arr.shape[0], 1), dtype=np.intp))
        return head.forward(T.reshape(cls_rows, (arr.shape[0], cfg.embed_dim)), training, rng)

    fit = fit_classifier(head, prefix[train_idx], labels[train_idx],
                         prefix[val_idx] if len(val_idx) else None,
                         labels[val_idx] if len(val_idx) else None,
                         epochs=epochs, lr=lr, batch_size=batch_size, seed=seed,
                         forward_fn=forward_fn,
                         params=head.parameters() + suffix_params)
    pred = predict_classes(head, prefix[test_idx], forward_fn=forward_fn)
    f1 = macro_f1(pred, labels[test_idx], classes)
    return FinetuneResult(f1=f1, n_train=len(train_idx), params=params, head=head, fit=fit)


# ---------------------------------------------------------------------------
# benchmark grid


@dataclass
class BenchmarkRow:
    task: str
    feature_kind: str
    codebook_size: int | None
    train_fraction: float
    seed: int
    f1: float


@dataclass
class BenchmarkResult:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def cell_stats(self) -> dict:
        """(feature_kind, codebook_size, train_fraction) -> (mean, std, n)."""
        cells: dict = {}
        for row in self.rows:
            key = (row.feature_kind, row.codebook_size, row.train_fraction)
            cells.setdefault(key, []).append(row.f1)
        return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in cells.items()}

    def grids_vs_raw(self) -> dict:
        """Per embedding kind: cellwise mean-F1 difference and gain vs RAW."""
        stats = self.cell_stats()
        kinds = sorted({k[0] for k in stats})
        out = {}
        if "raw" not in kinds:
            return out
        for kind in kinds:
            if kind == "raw":
                continue
            diff, gain = {}, {}
            for (fk, cb, frac), (mean, _, _) in stats.items():
                if fk != kind:
                    continue
                raw = stats.get(("raw", cb, frac))
                if raw is None:
                    continue
                diff[(cb, frac)] = mean - raw[0]
                gain[(cb, frac)] = 100.0 * (mean - raw[0]) / raw[0] if raw[0] else math.nan
            out[kind] = {"difference": diff, "gain_percent": gain}
        return out


FEATURE_LABELS = ("raw", "cls", "channel", "cls_noisy", "finetune")


def benchmark_cell(channels: list[ChannelMatrix], checkpoint: Checkpoint, task: LabelKind,
                   feature_label: str, train_fraction, seed: int,
                   codebook_size: int | None = None,
                   noise_snr_db: float = DEFAULT_NOISE_SNR_DB,
                   epochs: int = DEFAULT_HEAD_EPOCHS,
                   finetune_k: int = 3) -> float:
    """Train and score one grid cell; a pure function of its arguments."""
    if feature_label not in FEATURE_LABELS:
        raise ContractError(f"unknown feature kind {feature_label!r}")
    if task is LabelKind.BEAM:
        if codebook_size is None:
            raise ContractError("beam task needs a codebook size")
        cb = DftCodebook.build(codebook_size, channels[0].antennas)
        channels = label_beams(channels, cb)
        split = BEAM_SPLIT
        head_cfg: object = CnnHeadConfig()
        classes = codebook_size
    else:
        if any(ch.los is None for ch in channels):
            raise ContractError("channels carry no line-of-sight labels")
        split = LOS_SPLIT
        head_cfg = MlpHeadConfig()
        classes = 2

    if feature_label == "finetune":
        if task is not LabelKind.LOS:
            raise ContractError("the fine-tuning path is defined for the LoS task")
        res = finetune_last_k(checkpoint, finetune_k, channels, MlpHeadConfig(), seed,
                              split=split, train_fraction=train_fraction, epochs=epochs)
        return res.f1

    kind = {"raw": FeatureKind.RAW, "cls": FeatureKind.CLS, "cls_noisy": FeatureKind.CLS,
            "channel": FeatureKind.CHANNEL_EMB}[feature_label]
    snr = noise_snr_db if feature_label == "cls_noisy" else None
    feats = extract_features(channels, checkpoint, kind, task, snr_db=snr, noise_seed=seed)
    res = train_head(feats, head_cfg, split, seed, train_fraction=train_fraction,
                     epochs=epochs, num_classes=classes)
    return res.f1


def _cell_worker(args):
    channels, checkpoint, task, cell, noise_snr_db, epochs, finetune_k = args
    kind, cb, frac, seed = cell
    f1 = benchmark_cell(channels, checkpoint, task, kind, frac, seed,
                        codebook_size=cb, noise_snr_db=noise_snr_db,
                        epochs=epochs, finetune_k=finetune_k)
    return BenchmarkRow(task=task.value, feature_kind=kind, codebook_size=cb,
                        train_fraction=float(frac), seed=seed, f1=f1)


def run_benchmark(channels: list[ChannelMatrix], checkpoint: Checkpoint, task: LabelKind,
                  feature_kinds: list[str], train_fractions: list[float], seeds: list[int],
                  codebook_sizes: list[int] | None = None,
                  noise_snr_db: float = DEFAULT_NOISE_SNR_DB,
                  epochs: int = DEFAULT_HEAD_EPOCHS, jobs: int = 1,
                  finetune_k: int = 3) -> BenchmarkResult:
    """Sweep the benchmark grid; cells are independent and seed-deterministic."""
    if task is LabelKind.BEAM and not codebook_sizes:
        raise ContractError("beam task needs at least one codebook size")
    sizes = list(codebook_sizes) if task is LabelKind.BEAM else [None]
    cells = [(kind, cb, frac, seed)
             for kind in feature_kinds for cb in sizes
             for frac in train_fractions for seed in seeds]
    work = [(channels, checkpoint, task, cell, noise_snr_db, epochs, finetune_k)
            for cell in cells]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_cell_worker, work))
    else:
        rows = [_cell_worker(args) for args in work]
    meta = {
        "task": task.value,
        "feature_kinds": list(feature_kinds),
        "train_fractions": [float(f) for f in train_fractions],
        "codebook_sizes": [int(c) for c in codebook_sizes] if codebook_sizes else [],
        "seeds": [int(s) for s in seeds],
        "noise_snr_db": noise_snr_db,
        "epochs": epochs,
        "beam_labels": "same-band channels labeled with the bundled DFT codebook",
    }
    return BenchmarkResult(rows=rows, metadata=meta)


def export_embeddings(features: FeatureSet, path) -> None:
    """CSV with one row per sample: features then the label column last."""
    dim = features.matrix.shape[1]
    header = ",".join([f"f{i}" for i in range(dim)] + ["label"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row, label in zip(features.matrix, features.labels):
            vals = ",".join(f"{np.float32(v):.9g}" for v in row)
            fh.write(f"{vals},{int(label)}\n")
