"""Classifier heads for downstream tasks, built on the tensor engine.

The dense head (hidden widths 512/256/128 with batchnorm, ReLU, dropout) is
the line-of-sight classifier; the residual 1-D CNN (initial conv, three
residual blocks, global average pooling, dense classifier) handles beam
prediction, with widths sized to land near a 500K-parameter budget across
the supported input layouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .optim import AdamState, adam_step
from .rng import substream
from .tensor import BatchNormState, Tensor, backward, uniform_init


@dataclass
class MlpHeadConfig:
    widths: tuple[int, ...] = (512, 256, 128)
    dropout: float = 0.1
    classes: int = 2


@dataclass
class CnnHeadConfig:
    channels: tuple[int, int, int, int] = (64, 64, 128, 240)  # initial conv + 3 blocks
    fc_width: int = 256
    kernel: int = 3
    dropout: float = 0.1
    classes: int = 2
    budget: int = 500_000
    # long raw sequences get a strided initial conv to keep compute sane
    long_input_threshold: int = 512
    long_input_stride: int = 4


class MlpHead:
    """Dense classifier: [in -> 512 -> 256 -> 128 -> K] with BN/ReLU/dropout."""

    def __init__(self, cfg: MlpHeadConfig, in_dim: int, rng: np.random.Generator):
        self.cfg = cfg
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.gammas: list[Tensor] = []
        self.betas: list[Tensor] = []
        self.bn_states: list[BatchNormState] = []
        prev = in_dim
        for width in cfg.widths:
            self.weights.append(uniform_init(rng, (prev, width), prev))
            self.biases.append(Tensor(np.zeros(width), requires_grad=True))
            self.gammas.append(Tensor(np.ones(width), requires_grad=True))
            self.betas.append(Tensor(np.zeros(width), requires_grad=True))
            self.bn_states.append(BatchNormState(width))
            prev = width
        self.out_w = uniform_init(rng, (prev, cfg.classes), prev)
        self.out_b = Tensor(np.zeros(cfg.classes), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b, g, bt in zip(self.weights, self.biases, self.gammas, self.betas):
            out.extend([w, b, g, bt])
        out.extend([self.out_w, self.out_b])
        return out

    def forward(self, x: Tensor, training: bool,
                rng: np.random.Generator | None = None) -> Tensor:
        h = x
        for w, b, g, bt, state in zip(self.weights, self.biases, self.gammas,
                                      self.betas, self.bn_states):
            h = T.add(T.matmul(h, w), b)
            h = T.batchnorm(h, g, bt, state, training)
            h = T.relu(h)
            h = T.dropout(h, self.cfg.dropout, training, rng)
        return T.add(T.matmul(h, self.out_w), self.out_b)

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class _ConvBn:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int,
                 rng: np.random.Generator):
        self.kernel = kernel
        self.stride = stride
        self.pad = kernel // 2
        self.w = uniform_init(rng, (kernel * in_ch, out_ch), kernel * in_ch)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.gamma = Tensor(np.ones(out_ch), requires_grad=True)
        self.beta = Tensor(np.zeros(out_ch), requires_grad=True)
        self.bn = BatchNormState(out_ch)

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b, self.gamma, self.beta]

    def forward(self, x: Tensor, training: bool) -> Tensor:
        cols = T.unfold1d(x, self.kernel, stride=self.stride, pad=self.pad)
        y = T.add(T.matmul(cols, self.w), self.b)
        return T.batchnorm(y, self.gamma, self.beta, self.bn, training)


class _ResidualBlock:
    """conv-BN-ReLU-conv-BN plus an (optionally projected) shortcut."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int,
                 rng: np.random.Generator):
        self.conv1 = _ConvBn(in_ch, out_ch, kernel, stride, rng)
        self.conv2 = _ConvBn(out_ch, out_ch, kernel, 1, rng)
        self.shortcut = None
        if in_ch != out_ch or stride != 1:
            self.shortcut = _ConvBn(in_ch, out_ch, 1, stride, rng)

    def parameters(self) -> list[Tensor]:
        out = self.conv1.parameters() + self.conv2.parameters()
        if self.shortcut is not None:
            out += self.shortcut.parameters()
        return out

    def forward(self, x: Tensor, training: bool) -> Tensor:
        y = T.relu(self.conv1.forward(x, training))
        y = self.conv2.forward(y, training)
        skip = x if self.shortcut is None else self.shortcut.forward(x, training)
        return T.relu(T.add(y, skip))


class CnnHead:
    """Residual 1-D CNN over (B, T, C) inputs."""

    def __init__(self, cfg: CnnHeadConfig, in_channels: int, seq_len: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        stride0 = cfg.long_input_stride if seq_len >= cfg.long_input_threshold else 1
        c0, c1, c2, c3 = cfg.channels
        self.stem = _ConvBn(in_channels, c0, cfg.kernel, stride0, rng)
        self.blocks = [
            _ResidualBlock(c0, c1, cfg.kernel, 1, rng),
            _ResidualBlock(c1, c2, cfg.kernel, 2, rng),
            _ResidualBlock(c2, c3, cfg.kernel, 2, rng),
        ]
        self.fc1_w = uniform_init(rng, (c3, cfg.fc_width), c3)
        self.fc1_b = Tensor(np.zeros(cfg.fc_width), requires_grad=True)
        self.fc2_w = uniform_init(rng, (cfg.fc_width, cfg.classes), cfg.fc_width)
        self.fc2_b = Tensor(np.zeros(cfg.classes), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        out = self.stem.parameters()
        for block in self.blocks:
            out += block.parameters()
        out += [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]
        return out

    def forward(self, x: Tensor, training: bool,
                rng: np.random.Generator | None = None) -> Tensor:
        h = T.relu(self.stem.forward(x, training))
        for block in self.blocks:
            h = block.forward(h, training)
        h = T.mean_penultimate(h)
        h = T.relu(T.add(T.matmul(h, self.fc1_w), self.fc1_b))
        h = T.dropout(h, self.cfg.dropout, training, rng)
        return T.add(T.matmul(h, self.fc2_w), self.fc2_b)

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


@dataclass
class FitResult:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = -1


def fit_classifier(head, x_train: np.ndarray, y_train: np.ndarray,
                   x_val: np.ndarray | None, y_val: np.ndarray | None,
                   epochs: int = 100, lr: float = 1e-3, batch_size: int = 32,
                   weight_decay: float = 1e-5, seed: int = 0,
                   forward_fn=None, params=None) -> FitResult:
    """Train a head with Adam and cross-entropy; optional best-epoch selection.

    When a validation set is given, the parameters with the lowest validation
    loss are restored at the end. ``forward_fn(inputs, training, rng)``
    overrides the head's own forward (used by fine-tuning to chain encoder
    blocks in front); it must consume a (B, ...) numpy array. ``params``
    widens the optimized set beyond ``head.parameters()``.
    """
    if len(np.unique(y_train)) < 2:
        raise ContractError("training split must contain at least 2 classes")
    if params is None:
        params = head.parameters()
    opt = AdamState.for_params(params, lr=lr, weight_decay=weight_decay)
    if forward_fn is None:
        forward_fn = lambda arr, training, rng: head.forward(Tensor(arr), training, rng)
    n = x_train.shape[0]
    result = FitResult()
    best_loss = math.inf
    best_snapshot = None
    for epoch in range(epochs):
        order = substream(seed, "head-shuffle", epoch).permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            ids = order[start:start + batch_size]
            if len(ids) < 2:
                continue  # batchnorm needs at least two rows
            rng = substream(seed, "head-dropout", epoch, start)
            logits = forward_fn(x_train[ids], True, rng)
            loss = T.cross_entropy_logits(logits, y_train[ids])
            backward(loss)
            adam_step(params, opt)
            epoch_loss += loss.item() * len(ids)
        result.train_losses.append(epoch_loss / n)
        if x_val is not None and len(x_val):
            logits = forward_fn(x_val, False, None)
            val_loss = T.cross_entropy_logits(logits, y_val).item()
            result.val_losses.append(val_loss)
            if val_loss < best_loss:
                best_loss = val_loss
                best_snapshot = [p.data.copy() for p in params]
                result.best_epoch = epoch
    if best_snapshot is not None:
        for p, snap in zip(params, best_snapshot):
            p.data = snap
    return result


def predict_classes(head, x: np.ndarray, batch_size: int = 512, forward_fn=None) -> np.ndarray:
    if forward_fn is None:
        forward_fn = lambda arr, training, rng: head.forward(Tensor(arr), training, rng)
    out = []
    for start in range(0, x.shape[0], batch_size):
        logits = forward_fn(x[start:start + batch_size], False, None)
        out.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)
