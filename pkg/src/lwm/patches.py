"""Channel-to-patch conversion and masked-channel-modeling masks.

A channel's real plane is flattened antenna-major and cut into P/2
consecutive length-L chunks; the imaginary plane fills patches P/2..P-1.
Masking always pairs a real patch with its imaginary counterpart (same
action) so neither half can leak information about the other.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .channels import ChannelMatrix
from .errors import ContractError, ShapeError

MASK_VALUE = 1.0
RANDOM_SIGMA = 1.0
# per-selected-patch action probabilities: fully mask / random fill / keep
ACTION_PROBS = (0.8, 0.1, 0.1)


class Action(enum.Enum):
    MASK = "mask"
    RANDOM = "random"
    KEEP = "keep"


@dataclass
class PatchSequence:
    """Ordered real-valued patches: P/2 real-part rows then P/2 imaginary."""

    patches: np.ndarray  # (P, L) float64

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 2:
            raise ShapeError(f"patches must be 2-D, got shape {self.patches.shape}")
        if self.patches.shape[0] % 2 != 0:
            raise ShapeError("patch count must be even (real/imaginary halves)")

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_len(self) -> int:
        return self.patches.shape[1]


@dataclass
class MaskSpec:
    """Selected real-patch indices plus the action applied to each pair.

    The full masked set covers both halves: every selected index i also
    masks i + P/2 with the same action.
    """

    selected: tuple[int, ...]
    actions: tuple[Action, ...]
    num_patches: int
    mask_value: float = MASK_VALUE
    random_sigma: float = RANDOM_SIGMA

    def __post_init__(self):
        if len(self.selected) != len(self.actions):
            raise ShapeError("selected indices and actions differ in length")
        half = self.num_patches // 2
        if any(not 0 <= i < half for i in self.selected):
            raise ContractError("selected indices must address real-part patches")

    def masked_indices(self) -> list[int]:
        """All patch indices with loss targets (both halves), ascending."""
        half = self.num_patches // 2
        return sorted(list(self.selected) + [i + half for i in self.selected])


def patchify(ch: ChannelMatrix, num_patches: int) -> PatchSequence:
    """Split a channel into ``num_patches`` patches of length 2*A*S/P."""
    total = 2 * ch.antennas * ch.subcarriers
    if num_patches <= 0 or num_patches % 2 != 0:
        raise ShapeError(f"patch count must be a positive even number, got {num_patches}")
    if total % num_patches != 0:
        raise ShapeError(
            f"2*A*S = {total} is not divisible by patch count {num_patches}")
    half = num_patches // 2
    length = total // num_patches
    real_rows = ch.real.reshape(half, length)
    imag_rows = ch.imag.reshape(half, length)
    return PatchSequence(np.concatenate([real_rows, imag_rows], axis=0))


def unpatchify(seq: PatchSequence, antennas: int, subcarriers: int) -> ChannelMatrix:
    """Exact inverse of :func:`patchify`; labels are not reconstructed."""
    p, length = seq.num_patches, seq.patch_len
    if p * length != 2 * antennas * subcarriers:
        raise ShapeError(
            f"patches ({p}x{length}) do not fill a {antennas}x{subcarriers} channel")
    half = p // 2
    real = seq.patches[:half].reshape(antennas, subcarriers)
    imag = seq.patches[half:].reshape(antennas, subcarriers)
    return ChannelMatrix(real.copy(), imag.copy())


def draw_mask(num_patches: int, p_percent: float | None, rng: np.random.Generator,
              count: int | None = None) -> MaskSpec:
    """Select real-part patches uniformly and assign 0.8/0.1/0.1 actions.

    The selection count is ``floor(p_percent/100 * P/2)``; pass ``count`` to
    pin it directly (training configs store the integer). At least one patch
    must end up selected.
    """
    if num_patches <= 0 or num_patches % 2 != 0:
        raise ShapeError(f"patch count must be a positive even number, got {num_patches}")
    half = num_patches // 2
    if count is None:
        if p_percent is None or not 0.0 < p_percent < 100.0:
            raise ContractError(f"mask percentage must lie in (0, 100), got {p_percent}")
        count = math.floor(p_percent / 100.0 * half)
    if count < 1:
        raise ContractError("mask selection must cover at least one patch")
    if count > half:
        raise ContractError(f"cannot select {count} of {half} real patches")
    selected = np.sort(rng.choice(half, size=count, replace=False))
    draws = rng.random(count)
    actions = tuple(
        Action.MASK if u < ACTION_PROBS[0]
        else Action.RANDOM if u < ACTION_PROBS[0] + ACTION_PROBS[1]
        else Action.KEEP
        for u in draws
    )
    return MaskSpec(selected=tuple(int(i) for i in selected), actions=actions,
                    num_patches=num_patches)


def apply_mask(seq: PatchSequence, spec: MaskSpec,
               rng: np.random.Generator) -> tuple[PatchSequence, dict[int, np.ndarray]]:
    """Apply the mask actions pairwise and record every loss target.

    MASK replaces both paired patches with the uniform mask vector, RANDOM
    with fresh N(0, sigma^2) draws (independent per element and per half),
    KEEP leaves them untouched. Targets hold the original patches for all
    selected indices in both halves, whatever the action.
    """
    if spec.num_patches != seq.num_patches:
        raise ShapeError(
            f"mask drawn for {spec.num_patches} patches applied to {seq.num_patches}")
    half = seq.num_patches // 2
    length = seq.patch_len
    out = seq.patches.copy()
    targets: dict[int, np.ndarray] = {}
    for i, action in zip(spec.selected, spec.actions):
        pair = (i, i + half)
        for j in pair:
            targets[j] = seq.patches[j].copy()
        if action is Action.MASK:
            for j in pair:
                out[j] = spec.mask_value
        elif action is Action.RANDOM:
            for j in pair:
                out[j] = rng.normal(0.0, spec.random_sigma, size=length)
    return PatchSequence(out), targets
