"""Transformer encoder over channel patches with a linear reconstruction head.

The sequence is the P channel patches plus a learnable summary patch in
front. Input embedding adds a learned projection of uniform position patches
(value i for patch i, zeros for the summary slot). Each encoder block applies
multi-head scaled dot-product attention, residual + layernorm, a two-layer
ReLU feed-forward, and another residual + layernorm; no affine layernorm
parameters and no biases on the attention or decoder projections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .channels import ChannelMatrix
from .errors import ContractError, ShapeError
from .patches import patchify
from .tensor import Tensor, uniform_init


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-size model."""

    num_patches: int = 128     # P, even
    patch_len: int = 16        # L
    embed_dim: int = 64        # D
    num_heads: int = 12        # H
    num_layers: int = 12       # E
    ffn_dim: int = 256         # D_FF = T * D
    dropout: float = 0.1

    def __post_init__(self):
        if self.num_patches <= 0 or self.num_patches % 2 != 0:
            raise ContractError("num_patches must be a positive even number")
        if min(self.patch_len, self.embed_dim, self.num_heads, self.num_layers + 1) < 1:
            raise ContractError("model dimensions must be positive")
        if self.head_dim < 1:
            raise ContractError("embed_dim // num_heads must be >= 1")
        if self.num_heads * self.head_dim > self.embed_dim:
            raise ContractError("num_heads * head_dim must not exceed embed_dim")
        if self.ffn_dim % self.embed_dim != 0 or self.ffn_dim < self.embed_dim:
            raise ContractError("ffn_dim must be an integer multiple of embed_dim")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def micro_config() -> ModelConfig:
    """Tiny configuration used by gradient checks."""
    return ModelConfig(num_patches=8, patch_len=4, embed_dim=8, num_heads=2,
                       num_layers=2, ffn_dim=16, dropout=0.1)


@dataclass
class LayerParams:
    q_heads: list
    k_heads: list
    v_heads: list
    out_proj: Tensor     # (H*head_dim, D)
    ffn_w1: Tensor       # (D, ffn_dim)
    ffn_b1: Tensor
    ffn_w2: Tensor       # (ffn_dim, D)
    ffn_b2: Tensor

    def tensors(self) -> list[Tensor]:
        return (self.q_heads + self.k_heads + self.v_heads
                + [self.out_proj, self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2])


@dataclass
class LwmParameters:
    """Every trainable tensor of the model."""

    patch_embed_w: Tensor   # (D, L)
    patch_embed_b: Tensor   # (D,)
    pos_embed_w: Tensor     # (D, L)
    pos_embed_b: Tensor     # (D,)
    cls_patch: Tensor       # (L,), all entries equal at init
    layers: list = field(default_factory=list)
    decoder_w: Tensor = None  # (L, D)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "LwmParameters":
        d, length = cfg.embed_dim, cfg.patch_len
        dh = cfg.head_dim
        cls_value = rng.normal(0.0, math.sqrt(1.0 / length))
        layers = []
        for _ in range(cfg.num_layers):
            layers.append(LayerParams(
                q_heads=[uniform_init(rng, (d, dh), d) for _ in range(cfg.num_heads)],
                k_heads=[uniform_init(rng, (d, dh), d) for _ in range(cfg.num_heads)],
                v_heads=[uniform_init(rng, (d, dh), d) for _ in range(cfg.num_heads)],
                out_proj=uniform_init(rng, (cfg.num_heads * dh, d), cfg.num_heads * dh),
                ffn_w1=uniform_init(rng, (d, cfg.ffn_dim), d),
                ffn_b1=Tensor(np.zeros(cfg.ffn_dim), requires_grad=True),
                ffn_w2=uniform_init(rng, (cfg.ffn_dim, d), cfg.ffn_dim),
                ffn_b2=Tensor(np.zeros(d), requires_grad=True),
            ))
        return cls(
            patch_embed_w=uniform_init(rng, (d, length), length),
            patch_embed_b=Tensor(np.zeros(d), requires_grad=True),
            pos_embed_w=uniform_init(rng, (d, length), length),
            pos_embed_b=Tensor(np.zeros(d), requires_grad=True),
            cls_patch=Tensor(np.full(length, cls_value), requires_grad=True),
            layers=layers,
            decoder_w=uniform_init(rng, (length, d), d),
        )

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Stable (name, tensor) pairs, the checkpoint serialization order."""
        out = [
            ("W_emb", self.patch_embed_w),
            ("b_emb", self.patch_embed_b),
            ("W_pos", self.pos_embed_w),
            ("b_pos", self.pos_embed_b),
            ("p_cls", self.cls_patch),
        ]
        for li, layer in enumerate(self.layers):
            for hi in range(len(layer.q_heads)):
                out.append((f"layer.{li}.head.{hi}.W_Q", layer.q_heads[hi]))
                out.append((f"layer.{li}.head.{hi}.W_K", layer.k_heads[hi]))
                out.append((f"layer.{li}.head.{hi}.W_V", layer.v_heads[hi]))
            out.append((f"layer.{li}.W_O", layer.out_proj))
            out.append((f"layer.{li}.ffn.W_1", layer.ffn_w1))
            out.append((f"layer.{li}.ffn.b_1", layer.ffn_b1))
            out.append((f"layer.{li}.ffn.W_2", layer.ffn_w2))
            out.append((f"layer.{li}.ffn.b_2", layer.ffn_b2))
        out.append(("W_dec", self.decoder_w))
        return out

    def all_tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def copy(self) -> "LwmParameters":
        import copy as _copy

        def clone(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=t.requires_grad)

        layers = []
        for layer in self.layers:
            layers.append(LayerParams(
                q_heads=[clone(t) for t in layer.q_heads],
                k_heads=[clone(t) for t in layer.k_heads],
                v_heads=[clone(t) for t in layer.v_heads],
                out_proj=clone(layer.out_proj),
                ffn_w1=clone(layer.ffn_w1), ffn_b1=clone(layer.ffn_b1),
                ffn_w2=clone(layer.ffn_w2), ffn_b2=clone(layer.ffn_b2),
            ))
        return LwmParameters(
            patch_embed_w=clone(self.patch_embed_w), patch_embed_b=clone(self.patch_embed_b),
            pos_embed_w=clone(self.pos_embed_w), pos_embed_b=clone(self.pos_embed_b),
            cls_patch=clone(self.cls_patch), layers=layers, decoder_w=clone(self.decoder_w),
        )


@dataclass
class EmbeddingOutput:
    """(P+1) x D output embeddings: summary row plus per-patch block."""

    full: np.ndarray

    @property
    def cls(self) -> np.ndarray:
        return self.full[0]

    @property
    def channel(self) -> np.ndarray:
        return self.full[1:]


class AttentionCapture:
    """Post-softmax attention maps for every layer and head."""

    def __init__(self, cfg: ModelConfig):
        t = cfg.seq_len
        self.maps = np.zeros((cfg.num_layers, cfg.num_heads, t, t))

    def record(self, layer: int, attn_bh: np.ndarray, num_heads: int) -> None:
        if attn_bh.shape[0] != num_heads:
            raise ContractError("attention capture supports single-channel forwards only")
        self.maps[layer] = attn_bh

    def cls_scores(self) -> np.ndarray:
        """Row 0 of every map: per layer/head attention paid by the summary patch."""
        return self.maps[:, :, 0, :]


def param_count(cfg: ModelConfig) -> int:
    """Exact trainable-scalar count for a configuration.

    Attention projections and the decoder carry no bias; layernorm has no
    parameters.
    """
    d, length = cfg.embed_dim, cfg.patch_len
    dh = cfg.head_dim
    per_layer = (3 * cfg.num_heads * d * dh          # per-head Q, K, V
                 + cfg.num_heads * dh * d            # output projection
                 + d * cfg.ffn_dim + cfg.ffn_dim     # FFN first linear + bias
                 + cfg.ffn_dim * d + d)              # FFN second linear + bias
    return (length                                    # summary patch
            + 2 * (d * length + d)                    # patch + position embeddings
            + cfg.num_layers * per_layer
            + length * d)                             # decoder


def _position_patches(cfg: ModelConfig) -> np.ndarray:
    """Uniform position patches: zeros for the summary slot, value i for patch i."""
    values = np.arange(cfg.seq_len, dtype=np.float64)
    return np.repeat(values[:, None], cfg.patch_len, axis=1)


def embed_inputs(patch_rows: Tensor, params: LwmParameters, cfg: ModelConfig,
                 training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Project patches (summary slot included) and add position embeddings.

    ``patch_rows`` has shape (P+1, L) or (B, P+1, L) with the summary patch
    already in row 0.
    """
    if patch_rows.shape[-2] != cfg.seq_len or patch_rows.shape[-1] != cfg.patch_len:
        raise ShapeError(
            f"embed_inputs expects (..., {cfg.seq_len}, {cfg.patch_len}), got {patch_rows.shape}")
    emb = T.matmul(patch_rows, T.transpose(params.patch_embed_w), bias=params.patch_embed_b)
    pos_in = Tensor(_position_patches(cfg))
    pos = T.matmul(pos_in, T.transpose(params.pos_embed_w), bias=params.pos_embed_b)
    out = T.add(emb, pos)
    return T.dropout(out, cfg.dropout, training, rng)


def _split_heads(x: Tensor, batch: int, seq: int, heads: int, dh: int) -> Tensor:
    """(B, T, H*dh) -> (B*H, T, dh)."""
    x = T.reshape(x, (batch, seq, heads, dh))
    x = T.swap_axes(x, 1, 2)
    return T.reshape(x, (batch * heads, seq, dh))


def _merge_heads(x: Tensor, batch: int, seq: int, heads: int, dh: int) -> Tensor:
    """(B*H, T, dh) -> (B, T, H*dh)."""
    x = T.reshape(x, (batch, heads, seq, dh))
    x = T.swap_axes(x, 1, 2)
    return T.reshape(x, (batch, seq, heads * dh))


def encoder_block(x: Tensor, layer: LayerParams, cfg: ModelConfig, training: bool,
                  rng: np.random.Generator | None = None,
                  capture: AttentionCapture | None = None,
                  layer_index: int = 0) -> Tensor:
    """One encoder block over a (B, P+1, D) batch."""
    if x.ndim != 3 or x.shape[1] != cfg.seq_len or x.shape[2] != cfg.embed_dim:
        raise ShapeError(f"encoder_block expects (B, {cfg.seq_len}, {cfg.embed_dim}), got {x.shape}")
    batch, seq = x.shape[0], x.shape[1]
    heads, dh = cfg.num_heads, cfg.head_dim

    q = _split_heads(T.matmul(x, T.concat_last(layer.q_heads)), batch, seq, heads, dh)
    k = _split_heads(T.matmul(x, T.concat_last(layer.k_heads)), batch, seq, heads, dh)
    v = _split_heads(T.matmul(x, T.concat_last(layer.v_heads)), batch, seq, heads, dh)
    scores = T.matmul(q, T.transpose(k), alpha=1.0 / math.sqrt(dh))
    attn = T.softmax_rows(scores)
    if capture is not None:
        capture.record(layer_index, attn.data, heads)
    context = _merge_heads(T.matmul(attn, v), batch, seq, heads, dh)
    mh = T.dropout(T.matmul(context, layer.out_proj), cfg.dropout, training, rng)
    x1 = T.layernorm_rows(T.add(x, mh))

    hidden = T.relu(T.matmul(x1, layer.ffn_w1, bias=layer.ffn_b1))
    ffn = T.dropout(T.matmul(hidden, layer.ffn_w2, bias=layer.ffn_b2),
                    cfg.dropout, training, rng)
    return T.layernorm_rows(T.add(x1, ffn))


def encode(patch_block: Tensor, params: LwmParameters, cfg: ModelConfig, training: bool,
           rng: np.random.Generator | None = None,
           capture: AttentionCapture | None = None,
           start_layer: int = 0) -> Tensor:
    """Summary patch + embedding + all encoder blocks; returns (B, P+1, D).

    ``start_layer`` > 0 is used by fine-tuning to split the frozen prefix
    from the trainable suffix; the block expects pre-computed embeddings then.
    """
    if start_layer == 0:
        x = T.prepend_row(params.cls_patch, patch_block)
        x = embed_inputs(x, params, cfg, training, rng)
    else:
        x = patch_block
    for li in range(start_layer, cfg.num_layers):
        x = encoder_block(x, params.layers[li], cfg, training, rng, capture, li)
    return x


def forward_embed(ch: ChannelMatrix, params: LwmParameters, cfg: ModelConfig,
                  capture: AttentionCapture | None = None) -> EmbeddingOutput:
    """Deterministic inference embeddings for one channel (no masking, no dropout)."""
    seq = patchify(ch, cfg.num_patches)
    if seq.patch_len != cfg.patch_len:
        raise ShapeError(
            f"channel yields patches of length {seq.patch_len}, model expects {cfg.patch_len}")
    block = Tensor(seq.patches[None, :, :])
    out = encode(block, params, cfg, training=False, capture=capture)
    return EmbeddingOutput(full=out.data[0].copy())


def forward_pretrain(masked_patches: np.ndarray, target_idx: np.ndarray,
                     target_vals: np.ndarray, params: LwmParameters, cfg: ModelConfig,
                     training: bool = True,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Mean squared reconstruction error over all masked targets of a batch.

    ``masked_patches`` is (B, P, L); ``target_idx`` (B, n) holds patch
    indices (0-based, both halves); ``target_vals`` (B, n, L) the originals.
    """
    recon, targets = reconstruct_targets(masked_patches, target_idx, target_vals,
                                         params, cfg, training, rng)
    diff = T.sub(recon, targets)
    count = diff.shape[0] * diff.shape[1]
    return T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / count)


def reconstruct_targets(masked_patches: np.ndarray, target_idx: np.ndarray,
                        target_vals: np.ndarray, params: LwmParameters, cfg: ModelConfig,
                        training: bool, rng: np.random.Generator | None = None
                        ) -> tuple[Tensor, Tensor]:
    """Decode the masked positions; returns (reconstructions, targets), both (B, n, L)."""
    masked_patches = np.asarray(masked_patches, dtype=np.float64)
    target_idx = np.asarray(target_idx, dtype=np.intp)
    target_vals = np.asarray(target_vals, dtype=np.float64)
    if masked_patches.ndim != 3:
        raise ShapeError(f"expected a (B, P, L) batch, got {masked_patches.shape}")
    if target_idx.ndim != 2 or target_idx.shape[1] == 0:
        raise ContractError("every sample needs a non-empty target set")
    out = encode(Tensor(masked_patches), params, cfg, training, rng)
    # row 0 is the summary patch, so patch i lives in row i+1
    rows = T.gather_rows(out, target_idx + 1)
    recon = T.matmul(rows, T.transpose(params.decoder_w))
    return recon, Tensor(target_vals)


def capture_attention(ch: ChannelMatrix, params: LwmParameters,
                      cfg: ModelConfig) -> AttentionCapture:
    """Attention maps of a single inference forward pass."""
    capture = AttentionCapture(cfg)
    forward_embed(ch, params, cfg, capture=capture)
    return capture
