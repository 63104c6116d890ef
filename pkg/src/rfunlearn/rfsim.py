"""Synthetic IQ burst generation for a fleet of impaired transmitters.

Each simulated device carries a fixed set of small hardware impairments
(IQ imbalance, carrier frequency offset, oscillator phase noise, cubic
nonlinearity, DC offset).  The impairments, not the payload, are what a
downstream classifier learns to recognize, so every burst uses a fresh
random hop sequence and symbol stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError

# Fraction of each hop spent ramping amplitude up/down (raised cosine).
# Without envelope variation the cubic nonlinearity would reduce to a pure
# gain and be erased by power normalization.
RAMP_FRACTION = 0.05

# Hop channels span this fraction of the sampled bandwidth.
CHANNEL_SPAN = 0.8


@dataclass(frozen=True)
class DeviceProfile:
    """Per-device transmitter impairments; all-zero means a clean radio."""

    device_id: int
    gain_imbalance: float = 0.0
    phase_imbalance: float = 0.0
    cfo_hz: float = 0.0
    phase_noise_std: float = 0.0
    nonlin_coeff: float = 0.0
    dc_offset: complex = 0j

    def as_vector(self) -> np.ndarray:
        """Impairment parameters as a real vector (for distance checks)."""
        return np.array(
            [
                self.gain_imbalance,
                self.phase_imbalance,
                self.cfo_hz,
                self.phase_noise_std,
                self.nonlin_coeff,
                self.dc_offset.real,
                self.dc_offset.imag,
            ],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class ImpairmentRanges:
    """Sampling ranges used by make_fleet (low, high) per parameter."""

    gain_imbalance: tuple[float, float] = (-0.10, 0.10)
    phase_imbalance: tuple[float, float] = (-0.15, 0.15)
    cfo_hz: tuple[float, float] = (-20e3, 20e3)
    phase_noise_std: tuple[float, float] = (0.002, 0.03)
    nonlin_coeff: tuple[float, float] = (0.0, 0.20)
    dc_magnitude: tuple[float, float] = (0.0, 0.05)


DEFAULT_RANGES = ImpairmentRanges()


@dataclass(frozen=True)
class SignalConfig:
    """Shape of one synthetic frequency-hopping burst."""

    sample_rate_hz: float = 1e6
    burst_len: int = 2048
    num_channels: int = 8
    hop_len: int = 256
    symbol_rate_hz: float = 125e3
    snr_db: float = 15.0

    def validate(self) -> None:
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample_rate_hz must be positive")
        if self.hop_len <= 0 or self.burst_len <= 0 or self.burst_len % self.hop_len != 0:
            raise ConfigError(
                f"burst_len ({self.burst_len}) must be a positive multiple "
                f"of hop_len ({self.hop_len})"
            )
        if self.num_channels < 1:
            raise ConfigError("num_channels must be >= 1")
        if not 0 < self.symbol_rate_hz <= self.sample_rate_hz:
            raise ConfigError("symbol_rate_hz must be in (0, sample_rate_hz]")
        centers = channel_centers_hz(self)
        if np.max(np.abs(centers)) >= self.sample_rate_hz / 2:
            raise ConfigError("hop channels must lie strictly inside +-fs/2")


@dataclass
class IQRecording:
    """A complex baseband capture plus the metadata needed to regenerate it."""

    samples: np.ndarray  # complex64
    sample_rate_hz: float
    device_id: int
    seed: int


def channel_centers_hz(config: SignalConfig) -> np.ndarray:
    """Hop channel center frequencies, evenly spread around 0 Hz."""
    c = config.num_channels
    spacing = CHANNEL_SPAN * config.sample_rate_hz / c
    return (np.arange(c) - (c - 1) / 2.0) * spacing


def make_fleet(
    n: int, seed: int, ranges: ImpairmentRanges = DEFAULT_RANGES
) -> list[DeviceProfile]:
    """Draw n device profiles deterministically from the seed.

    Each impairment dimension is sampled with a Latin-hypercube layout
    (one stratum per device, random order, jitter within the stratum) so
    devices are guaranteed pairwise distinct in every dimension while the
    draw stays a pure function of the seed.
    """
    if n < 2:
        raise ConfigError(f"fleet needs at least 2 devices, got {n}")
    rng = np.random.default_rng(seed)

    def lhs(low: float, high: float) -> np.ndarray:
        strata = rng.permutation(n)
        jitter = rng.uniform(0.0, 1.0, n)
        return low + (strata + jitter) * (high - low) / n

    gain = lhs(*ranges.gain_imbalance)
    phase = lhs(*ranges.phase_imbalance)
    cfo = lhs(*ranges.cfo_hz)
    pnoise = lhs(*ranges.phase_noise_std)
    nonlin = lhs(*ranges.nonlin_coeff)
    dc_mag = lhs(*ranges.dc_magnitude)
    dc_arg = rng.uniform(0.0, 2.0 * math.pi, n)

    fleet = [
        DeviceProfile(
            device_id=i,
            gain_imbalance=float(gain[i]),
            phase_imbalance=float(phase[i]),
            cfo_hz=float(cfo[i]),
            phase_noise_std=float(pnoise[i]),
            nonlin_coeff=float(nonlin[i]),
            dc_offset=complex(dc_mag[i] * math.cos(dc_arg[i]), dc_mag[i] * math.sin(dc_arg[i])),
        )
        for i in range(n)
    ]
    vecs = np.stack([p.as_vector() for p in fleet])
    dists = np.linalg.norm(vecs[:, None, :] - vecs[None, :, :], axis=-1)
    if np.min(dists[~np.eye(n, dtype=bool)]) <= 0.0:
        raise ConfigError("fleet draw produced duplicate impairment vectors")
    return fleet


def _hop_envelope(hop_len: int) -> np.ndarray:
    ramp = max(1, int(RAMP_FRACTION * hop_len))
    env = np.ones(hop_len)
    up = 0.5 * (1.0 - np.cos(math.pi * (np.arange(ramp) + 0.5) / ramp))
    env[:ramp] = up
    env[hop_len - ramp:] = up[::-1]
    return env


def clean_burst(config: SignalConfig, rng: np.random.Generator) -> np.ndarray:
    """Unimpaired FHSS-style burst, power-normalized, complex128.

    Random hop sequence of QPSK sub-bursts with rectangular symbol pulses
    and a short raised-cosine amplitude ramp at each hop edge.
    """
    fs = config.sample_rate_hz
    num_hops = config.burst_len // config.hop_len
    centers = channel_centers_hz(config)
    sps = max(1, round(fs / config.symbol_rate_hz))
    env = _hop_envelope(config.hop_len)

    hop_seq = rng.integers(0, config.num_channels, num_hops)
    out = np.empty(config.burst_len, dtype=np.complex128)
    for h in range(num_hops):
        nsym = -(-config.hop_len // sps)  # ceil
        quad = rng.integers(0, 4, nsym)
        symbols = np.exp(1j * (math.pi / 4 + quad * math.pi / 2))
        base = np.repeat(symbols, sps)[: config.hop_len] * env
        t = np.arange(h * config.hop_len, (h + 1) * config.hop_len)
        out[h * config.hop_len : (h + 1) * config.hop_len] = base * np.exp(
            2j * math.pi * centers[hop_seq[h]] / fs * t
        )
    return _normalize_power(out)


def _normalize_power(x: np.ndarray) -> np.ndarray:
    power = np.mean(np.abs(x) ** 2)
    if power <= 0:
        raise DataError("cannot power-normalize an all-zero signal")
    return x / math.sqrt(power)


def apply_impairments(
    x: np.ndarray,
    profile: DeviceProfile,
    sample_rate_hz: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run the transmitter impairment chain over a complex signal.

    Order is fixed: cubic nonlinearity, IQ imbalance, CFO rotation,
    phase noise, DC offset.  A profile with all-zero parameters is the
    identity map.
    """
    y = np.asarray(x, dtype=np.complex128)
    if profile.nonlin_coeff != 0.0:
        y = y + profile.nonlin_coeff * np.abs(y) ** 2 * y
    e = (1.0 + profile.gain_imbalance) * np.exp(1j * profile.phase_imbalance)
    mu = (1.0 + e) / 2.0
    nu = (1.0 - e) / 2.0
    if nu != 0.0 or mu != 1.0:
        y = mu * y + nu * np.conj(y)
    if profile.cfo_hz != 0.0:
        t = np.arange(y.size)
        y = y * np.exp(2j * math.pi * profile.cfo_hz / sample_rate_hz * t)
    if profile.phase_noise_std > 0.0:
        theta = np.cumsum(rng.normal(0.0, profile.phase_noise_std, y.size))
        y = y * np.exp(1j * theta)
    if profile.dc_offset != 0:
        y = y + profile.dc_offset
    return y


def synth_burst(profile: DeviceProfile, config: SignalConfig, seed: int) -> IQRecording:
    """Generate one impaired burst; deterministic in (profile, config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    y = clean_burst(config, rng)
    y = apply_impairments(y, profile, config.sample_rate_hz, rng)
    y = _normalize_power(y)  # unit power before AWGN
    if np.isfinite(config.snr_db):
        nvar = 10.0 ** (-config.snr_db / 10.0)
        noise = math.sqrt(nvar / 2.0) * (
            rng.standard_normal(y.size) + 1j * rng.standard_normal(y.size)
        )
        y = y + noise
    return IQRecording(
        samples=y.astype(np.complex64),
        sample_rate_hz=config.sample_rate_hz,
        device_id=profile.device_id,
        seed=seed,
    )


def write_iq(rec: IQRecording, path) -> None:
    """Write raw interleaved float32 little-endian I/Q pairs (no header).

    Metadata (sample rate, device id, seed) is the caller's job to record,
    normally via the dataset manifest.
    """
    data = np.ascontiguousarray(rec.samples, dtype="<c8")
    with open(path, "wb") as f:
        f.write(data.tobytes())


def read_iq(path, *, sample_rate_hz: float, device_id: int, seed: int) -> IQRecording:
    """Read an IQ file written by write_iq; metadata must be supplied."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % 8 != 0:
        raise FormatError(
            f"{path}: {len(raw)} bytes is not a whole number of complex float32 samples"
        )
    samples = np.frombuffer(raw, dtype="<c8").astype(np.complex64, copy=True)
    return IQRecording(
        samples=samples, sample_rate_hz=sample_rate_hz, device_id=device_id, seed=seed
    )
