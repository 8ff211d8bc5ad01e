"""Channel generator, beam labeling, noise, and the dataset file format."""

import math

import numpy as np
import pytest

from lwm.channels import (
    ChannelMatrix,
    DftCodebook,
    ScenarioConfig,
    add_noise,
    best_beam,
    generate_channel,
    generate_channels,
    label_beams,
    normalize_channels,
    read_dataset,
    synthesize,
    write_dataset,
)
from lwm.errors import (
    ContractError,
    DimensionOverflowError,
    FileFormatError,
    MagicError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)
from lwm.rng import substream


class TestSynthesize:
    def test_single_boresight_path_is_flat_ones(self):
        h = synthesize(np.array([1.0 + 0j]), np.array([0.0]), np.array([0.0]),
                       antennas=4, subcarriers=6, carrier_spacing=120e3)
        assert np.allclose(h, np.ones((4, 6)), atol=1e-12)

    def test_single_path_magnitude_is_flat(self):
        gain = 0.3 - 0.4j
        h = synthesize(np.array([gain]), np.array([5e-8]), np.array([math.pi / 6]),
                       antennas=8, subcarriers=8, carrier_spacing=120e3)
        assert np.allclose(np.abs(h), abs(gain), atol=1e-12)


class TestGenerateChannel:
    def test_mean_power_close_to_one(self):
        cfg = ScenarioConfig(seed=42)
        channels = generate_channels(cfg, 10_000)
        mean_power = np.mean([ch.power() for ch in channels])
        assert abs(mean_power - 1.0) < 0.01

    def test_los_labels_present_and_mixed(self):
        channels = generate_channels(ScenarioConfig(seed=1), 200)
        labels = [ch.los for ch in channels]
        assert all(isinstance(l, bool) for l in labels)
        assert 0 < sum(labels) < 200

    def test_los_channels_have_stronger_dominant_path(self):
        # Rician-style dominance: power of the strongest path over total
        cfg = ScenarioConfig(seed=3)
        dominance = {True: [], False: []}
        for i in range(1000):
            gains, _, _, los = draw_paths(cfg, substream(cfg.seed, "channel", i))
            powers = np.abs(gains) ** 2
            dominance[los].append(powers.max() / powers.sum())
        assert np.mean(dominance[True]) > np.mean(dominance[False])

    def test_determinism(self):
        a = generate_channels(ScenarioConfig(seed=9), 5)
        b = generate_channels(ScenarioConfig(seed=9), 5)
        for ca, cb in zip(a, b):
            assert np.array_equal(ca.real, cb.real)
            assert np.array_equal(ca.imag, cb.imag)
            assert ca.los == cb.los

    def test_config_validation(self):
        with pytest.raises(ContractError):
            ScenarioConfig(num_paths=0)
        with pytest.raises(ContractError):
            ScenarioConfig(los_probability=1.5)


def test_normalize_channels_pins_mean_power():
    channels = generate_channels(ScenarioConfig(seed=17, num_paths=3), 500)
    scaled = [ch.scaled(3.7) for ch in channels]
    normalized, constant = normalize_channels(scaled)
    mean_power = np.mean([ch.power() for ch in normalized])
    assert abs(mean_power - 1.0) < 1e-6
    assert constant > 0


class TestBestBeam:
    def test_flat_channel_picks_beam_zero(self):
        ch = ChannelMatrix(np.ones((8, 4)), np.zeros((8, 4)))
        cb = DftCodebook.build(8, 8)
        assert best_beam(ch, cb) == 0

    def test_matched_filter(self):
        cb = DftCodebook.build(16, 16)
        target = cb.vectors[3]
        h = np.repeat(target[:, None], 4, axis=1)
        ch = ChannelMatrix(h.real, h.imag)
        assert best_beam(ch, cb) == 3

    def test_equals_brute_force(self):
        # the exhaustive sum of inner products IS the definition
        rng = substream(5, "beam-test")
        for _ in range(20):
            h = rng.standard_normal((16, 8)) + 1j * rng.standard_normal((16, 8))
            ch = ChannelMatrix(h.real, h.imag)
            cb = DftCodebook.build(16, 16)
            powers = []
            for k in range(16):
                total = 0.0
                for s in range(8):
                    total += abs(np.vdot(cb.vectors[k], h[:, s])) ** 2
                powers.append(total)
            assert best_beam(ch, cb) == int(np.argmax(powers))

    def test_invariant_under_complex_scaling(self):
        rng = substream(6, "beam-scale")
        cb = DftCodebook.build(32, 16)
        for _ in range(10):
            h = rng.standard_normal((16, 8)) + 1j * rng.standard_normal((16, 8))
            ch = ChannelMatrix(h.real, h.imag)
            z = (2.5 - 1.25j) * h
            scaled = ChannelMatrix(z.real, z.imag)
            assert best_beam(ch, cb) == best_beam(scaled, cb)

    def test_antenna_mismatch_rejected(self):
        ch = ChannelMatrix(np.ones((8, 4)), np.zeros((8, 4)))
        with pytest.raises(ShapeError):
            best_beam(ch, DftCodebook.build(16, 32))


def test_codebook_unit_norm_and_bounds():
    cb = DftCodebook.build(64, 32)
    norms = np.linalg.norm(cb.vectors, axis=1)
    assert np.all(np.abs(norms - 1.0) < 1e-9)
    with pytest.raises(ContractError):
        DftCodebook.build(1, 32)
    with pytest.raises(ContractError):
        DftCodebook.build(5000, 32)


class TestAddNoise:
    def test_infinite_snr_is_identity(self):
        ch = generate_channel(ScenarioConfig(seed=2), substream(2, "c"))
        out = add_noise(ch, math.inf, substream(0, "n"))
        assert np.array_equal(out.real, ch.real)
        assert np.array_equal(out.imag, ch.imag)
        assert out.los == ch.los

    def test_zero_db_noise_power(self):
        # 0 dB on a unit-power channel: noise power == 1 within 1% over 1e6 elems
        a = 1000
        ch = ChannelMatrix(np.ones((a, a)) / math.sqrt(2), np.ones((a, a)) / math.sqrt(2))
        noisy = add_noise(ch, 0.0, substream(8, "noise"))
        noise = (noisy.real - ch.real) ** 2 + (noisy.imag - ch.imag) ** 2
        assert abs(noise.mean() - 1.0) < 0.01

    def test_5db_operating_point(self):
        # noise power = 10^(-0.5) ~ 0.316 x signal power
        a = 1000
        ch = ChannelMatrix(np.ones((a, a)), np.zeros((a, a)))
        noisy = add_noise(ch, 5.0, substream(9, "noise"))
        noise = (noisy.real - ch.real) ** 2 + (noisy.imag - ch.imag) ** 2
        expected = 10 ** (-0.5)
        assert abs(noise.mean() / ch.power() - expected) < 0.01 * expected * 3

    def test_labels_preserved(self):
        ch = ChannelMatrix(np.ones((4, 4)), np.zeros((4, 4)), los=True, beam=7)
        out = add_noise(ch, 10.0, substream(1, "n"))
        assert out.los is True and out.beam == 7

    def test_zero_power_rejected(self):
        ch = ChannelMatrix(np.zeros((4, 4)), np.zeros((4, 4)))
        with pytest.raises(ContractError):
            add_noise(ch, 10.0, substream(1, "n"))

    def test_beam_labels_stable_at_30db(self):
        channels = generate_channels(ScenarioConfig(seed=31), 1000)
        cb = DftCodebook.build(64, 32)
        labeled = label_beams(channels, cb)
        flips = 0
        for i, ch in enumerate(labeled):
            noisy = add_noise(ch, 30.0, substream(77, "stab", i))
            if best_beam(noisy, cb) != ch.beam:
                flips += 1
        assert flips / len(labeled) < 0.05


class TestDatasetFormat:
    def test_round_trip_100_channels(self, tmp_path):
        channels = label_beams(generate_channels(ScenarioConfig(seed=4), 100),
                               DftCodebook.build(64, 32))
        path = tmp_path / "c.lwmc"
        write_dataset(path, channels)
        loaded = read_dataset(path)
        assert len(loaded) == 100
        for orig, got in zip(channels, loaded):
            assert np.array_equal(got.real, orig.real.astype(np.float32).astype(np.float64))
            assert np.array_equal(got.imag, orig.imag.astype(np.float32).astype(np.float64))
            assert got.los == orig.los and got.beam == orig.beam

    def test_bytes_stable_after_round_trip(self, tmp_path):
        channels = generate_channels(ScenarioConfig(seed=4), 10)
        p1, p2 = tmp_path / "a.lwmc", tmp_path / "b.lwmc"
        write_dataset(p1, channels)
        write_dataset(p2, read_dataset(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_dataset(self, tmp_path):
        path = tmp_path / "empty.lwmc"
        write_dataset(path, [])
        assert read_dataset(path) == []
        assert path.stat().st_size == 15  # bare header

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.lwmc"
        write_dataset(path, generate_channels(ScenarioConfig(seed=1), 2))
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(MagicError):
            read_dataset(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "bad.lwmc"
        write_dataset(path, generate_channels(ScenarioConfig(seed=1), 2))
        blob = bytearray(path.read_bytes())
        blob[4:6] = (99).to_bytes(2, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            read_dataset(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "bad.lwmc"
        write_dataset(path, generate_channels(ScenarioConfig(seed=1), 2))
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(TruncatedFileError):
            read_dataset(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "bad.lwmc"
        write_dataset(path, generate_channels(ScenarioConfig(seed=1), 2))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FileFormatError):
            read_dataset(path)

    def test_dimension_overflow(self, tmp_path):
        ch = ChannelMatrix(np.ones((2, 2)), np.zeros((2, 2)), beam=70_000)
        with pytest.raises(DimensionOverflowError):
            write_dataset(tmp_path / "x.lwmc", [ch])

    def test_inconsistent_labels_rejected(self, tmp_path):
        a = ChannelMatrix(np.ones((2, 2)), np.zeros((2, 2)), los=True)
        b = ChannelMatrix(np.ones((2, 2)), np.zeros((2, 2)))
        with pytest.raises(ContractError):
            write_dataset(tmp_path / "x.lwmc", [a, b])

    def test_mixed_shapes_rejected(self, tmp_path):
        a = ChannelMatrix(np.ones((2, 2)), np.zeros((2, 2)))
        b = ChannelMatrix(np.ones((4, 2)), np.zeros((4, 2)))
        with pytest.raises(ShapeError):
            write_dataset(tmp_path / "x.lwmc", [a, b])
