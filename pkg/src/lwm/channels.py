"""Synthetic wireless channels, downstream labels, noise, and dataset files.

Channels come from a clustered geometric multipath model: a handful of paths
with complex Gaussian gains, exponentially distributed delays, and angles
drawn inside a per-channel azimuth window. A line-of-sight channel gets a
dominant first path at the earliest delay. Per-path unit phase factors keep
the expected per-element power at 1, and ``normalize_channels`` pins the
empirical dataset mean exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ContractError,
    DimensionOverflowError,
    FileFormatError,
    MagicError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)
from .rng import substream

DATASET_MAGIC = b"LWMC"
DATASET_VERSION = 1
_LOS_FLAG = 0x01
_BEAM_FLAG = 0x02


@dataclass
class ChannelMatrix:
    """Complex antennas-by-subcarriers channel with optional task labels."""

    real: np.ndarray
    imag: np.ndarray
    los: bool | None = None
    beam: int | None = None

    def __post_init__(self):
        self.real = np.asarray(self.real, dtype=np.float64)
        self.imag = np.asarray(self.imag, dtype=np.float64)
        if self.real.ndim != 2 or self.real.shape != self.imag.shape:
            raise ShapeError(
                f"channel planes must be equal 2-D arrays, got {self.real.shape} and {self.imag.shape}")

    @property
    def antennas(self) -> int:
        return self.real.shape[0]

    @property
    def subcarriers(self) -> int:
        return self.real.shape[1]

    def as_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    def power(self) -> float:
        """Mean per-element power (|h|^2 averaged over the matrix)."""
        return float(np.mean(self.real * self.real + self.imag * self.imag))

    def scaled(self, factor: float) -> "ChannelMatrix":
        return ChannelMatrix(self.real * factor, self.imag * factor, self.los, self.beam)


@dataclass
class ScenarioConfig:
    """Knobs of the geometric channel generator."""

    antennas: int = 32
    subcarriers: int = 32
    num_paths: int = 8
    los_probability: float = 0.4
    delay_spread: float = 2e-7       # seconds
    angle_spread: float = 0.5        # radians, width of the per-channel cluster
    carrier_spacing: float = 120e3   # hertz
    seed: int = 0

    def __post_init__(self):
        if self.num_paths < 1:
            raise ContractError("num_paths must be >= 1")
        if not 0.0 <= self.los_probability <= 1.0:
            raise ContractError("los_probability must lie in [0, 1]")
        if self.antennas < 1 or self.subcarriers < 1:
            raise ContractError("antennas and subcarriers must be positive")


def synthesize(gains: np.ndarray, delays: np.ndarray, angles: np.ndarray,
               antennas: int, subcarriers: int, carrier_spacing: float) -> np.ndarray:
    """Deterministic multipath superposition.

    H[a, s] = sum_l gains[l] * exp(-2j*pi*s*df*delays[l]) * exp(1j*pi*a*sin(angles[l]))
    for a half-wavelength uniform linear array.
    """
    gains = np.asarray(gains, dtype=np.complex128)
    steer = np.exp(1j * math.pi * np.outer(np.arange(antennas), np.sin(angles)))
    freq = np.exp(-2j * math.pi * carrier_spacing * np.outer(delays, np.arange(subcarriers)))
    return steer @ (gains[:, None] * freq)


def draw_paths(cfg: ScenarioConfig, rng: np.random.Generator
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    """Sample one channel's multipath profile: (gains, delays, angles, los).

    Gains are unit-normalized complex path amplitudes; a line-of-sight draw
    boosts the first (earliest) path to at least 3x the RMS of the rest.
    """
    n = cfg.num_paths
    gains = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / math.sqrt(2.0)
    delays = np.sort(rng.exponential(cfg.delay_spread, size=n))
    center = rng.uniform(-math.pi / 2, math.pi / 2)
    angles = center + rng.uniform(-cfg.angle_spread / 2, cfg.angle_spread / 2, size=n)
    los = bool(rng.random() < cfg.los_probability)
    if los and n > 1:
        rest_rms = math.sqrt(float(np.mean(np.abs(gains[1:]) ** 2)))
        factor = rng.uniform(3.0, 4.0)
        gains[0] = factor * max(rest_rms, 1e-12) * np.exp(1j * rng.uniform(0.0, 2 * math.pi))
    gains /= np.linalg.norm(gains)
    return gains, delays, angles, los


def generate_channel(cfg: ScenarioConfig, rng: np.random.Generator) -> ChannelMatrix:
    """Draw one labeled channel from the clustered geometric model."""
    gains, delays, angles, los = draw_paths(cfg, rng)
    h = synthesize(gains, delays, angles, cfg.antennas, cfg.subcarriers, cfg.carrier_spacing)
    return ChannelMatrix(h.real, h.imag, los=los)


def generate_channels(cfg: ScenarioConfig, count: int) -> list[ChannelMatrix]:
    """Generate ``count`` channels from per-channel derived streams."""
    return [generate_channel(cfg, substream(cfg.seed, "channel", i)) for i in range(count)]


def normalize_channels(channels: list[ChannelMatrix]) -> tuple[list[ChannelMatrix], float]:
    """Scale the dataset by one constant so mean per-element power is 1.

    Returns the scaled channels and the constant, which must be applied to
    any channel fed to a model trained on this dataset.
    """
    if not channels:
        raise ContractError("cannot normalize an empty dataset")
    mean_power = float(np.mean([ch.power() for ch in channels]))
    if mean_power <= 0.0:
        raise ContractError("dataset has zero power")
    constant = 1.0 / math.sqrt(mean_power)
    return [ch.scaled(constant) for ch in channels], constant


@dataclass
class DftCodebook:
    """K beamforming vectors over an A-element half-wavelength array."""

    size: int
    antennas: int
    vectors: np.ndarray  # (K, A) complex, unit norm rows

    @classmethod
    def build(cls, size: int, antennas: int) -> "DftCodebook":
        if not 2 <= size <= 4096:
            raise ContractError(f"codebook size must be in [2, 4096], got {size}")
        k = np.arange(size)[:, None]
        a = np.arange(antennas)[None, :]
        vectors = np.exp(-2j * math.pi * a * k / size) / math.sqrt(antennas)
        return cls(size=size, antennas=antennas, vectors=vectors)


def best_beam(ch: ChannelMatrix, cb: DftCodebook) -> int:
    """Index of the codebook vector with the highest total received power.

    argmax_k sum_s |f_k^H h_s|^2; ties break toward the lowest index.
    """
    if cb.antennas != ch.antennas:
        raise ShapeError(f"codebook antennas {cb.antennas} != channel antennas {ch.antennas}")
    gains = np.conj(cb.vectors) @ ch.as_complex()  # (K, S)
    powers = np.sum(gains.real ** 2 + gains.imag ** 2, axis=1)
    return int(np.argmax(powers))


def label_beams(channels: list[ChannelMatrix], cb: DftCodebook) -> list[ChannelMatrix]:
    return [replace(ch, beam=best_beam(ch, cb)) for ch in channels]


def add_noise(ch: ChannelMatrix, snr_db: float, rng: np.random.Generator) -> ChannelMatrix:
    """Add i.i.d. complex Gaussian noise at the given SNR; labels survive.

    Per-element noise variance is P_ch / 10^(snr_db/10) where P_ch is the
    channel's mean per-element power. ``snr_db = inf`` returns a copy.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return ChannelMatrix(ch.real.copy(), ch.imag.copy(), ch.los, ch.beam)
    power = ch.power()
    if power <= 0.0:
        raise ContractError("add_noise needs a channel with nonzero power")
    sigma = math.sqrt(power * 10.0 ** (-snr_db / 10.0) / 2.0)
    shape = ch.real.shape
    return ChannelMatrix(
        ch.real + sigma * rng.standard_normal(shape),
        ch.imag + sigma * rng.standard_normal(shape),
        ch.los,
        ch.beam,
    )


# ---------------------------------------------------------------------------
# dataset file format
#
# magic "LWMC" | version u16 | count u32 | antennas u16 | subcarriers u16 |
# label_flags u8 (bit0 LoS, bit1 beam) | per channel: real plane row-major
# little-endian f32, imag plane likewise, then LoS u8 / beam u16 as flagged.

_HEADER = struct.Struct("<4sHIHHB")


def _label_flags(channels: list[ChannelMatrix]) -> int:
    flags = 0
    has_los = [ch.los is not None for ch in channels]
    has_beam = [ch.beam is not None for ch in channels]
    if any(has_los):
        if not all(has_los):
            raise ContractError("inconsistent LoS labels: present on some channels only")
        flags |= _LOS_FLAG
    if any(has_beam):
        if not all(has_beam):
            raise ContractError("inconsistent beam labels: present on some channels only")
        flags |= _BEAM_FLAG
    return flags


def write_dataset(path, channels: list[ChannelMatrix]) -> None:
    if len(channels) > 0xFFFFFFFF:
        raise DimensionOverflowError("channel count exceeds u32")
    if channels:
        a, s = channels[0].antennas, channels[0].subcarriers
        for ch in channels:
            if (ch.antennas, ch.subcarriers) != (a, s):
                raise ShapeError("all channels in a dataset must share antennas/subcarriers")
        if a > 0xFFFF or s > 0xFFFF:
            raise DimensionOverflowError("antennas/subcarriers exceed u16")
    else:
        a = s = 0
    flags = _label_flags(channels)
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(channels), a, s, flags)]
    for ch in channels:
        parts.append(ch.real.astype("<f4").tobytes())
        parts.append(ch.imag.astype("<f4").tobytes())
        if flags & _LOS_FLAG:
            parts.append(struct.pack("<B", 1 if ch.los else 0))
        if flags & _BEAM_FLAG:
            if not 0 <= ch.beam <= 0xFFFF:
                raise DimensionOverflowError(f"beam label {ch.beam} exceeds u16")
            parts.append(struct.pack("<H", ch.beam))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_dataset(path) -> list[ChannelMatrix]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"file too short for header: {len(blob)} bytes")
    magic, version, count, a, s, flags = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {version}")
    if flags & ~(_LOS_FLAG | _BEAM_FLAG):
        raise FileFormatError(f"unknown label flags 0x{flags:02x}")
    plane = a * s * 4
    per_channel = 2 * plane
    if flags & _LOS_FLAG:
        per_channel += 1
    if flags & _BEAM_FLAG:
        per_channel += 2
    expected = _HEADER.size + count * per_channel
    if len(blob) < expected:
        raise TruncatedFileError(f"expected {expected} bytes, file has {len(blob)}")
    if len(blob) > expected:
        raise FileFormatError(f"{len(blob) - expected} trailing bytes after payload")
    channels = []
    off = _HEADER.size
    for _ in range(count):
        real = np.frombuffer(blob, dtype="<f4", count=a * s, offset=off).reshape(a, s)
        off += plane
        imag = np.frombuffer(blob, dtype="<f4", count=a * s, offset=off).reshape(a, s)
        off += plane
        los = beam = None
        if flags & _LOS_FLAG:
            los = bool(blob[off])
            off += 1
        if flags & _BEAM_FLAG:
            (beam,) = struct.unpack_from("<H", blob, off)
            off += 2
        channels.append(ChannelMatrix(real, imag, los=los, beam=beam))
    return channels
