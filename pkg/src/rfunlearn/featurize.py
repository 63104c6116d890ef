"""IQ recordings to normalized square spectrograms, plus dataset assembly."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .rfsim import IQRecording

CACHE_MAGIC = b"SGC1"
CACHE_VERSION = 1


@dataclass(frozen=True)
class FeaturizeConfig:
    fft_size: int = 64
    hop_size: int = 32
    window: str = "hann"  # "hann" | "rectangular"
    out_size: int = 32
    log_magnitude: bool = True
    eps: float = 1e-10

    def validate(self) -> None:
        if not 0 < self.hop_size <= self.fft_size:
            raise ConfigError("require 0 < hop_size <= fft_size")
        if self.out_size < 8:
            raise ConfigError("out_size must be >= 8")
        if self.window not in ("hann", "rectangular"):
            raise ConfigError(f"unknown window {self.window!r}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")


@dataclass
class Spectrogram:
    """One normalized out_size x out_size training sample."""

    pixels: np.ndarray  # float32, values in [0, 1]
    label: int
    source_seed: int = -1


@dataclass
class DatasetSplit:
    """Train/test spectrograms with forget/retain views over the train set."""

    train: list[Spectrogram]
    test: list[Spectrogram]
    forget_labels: frozenset[int] = field(default_factory=frozenset)

    @property
    def forget_train(self) -> list[Spectrogram]:
        return [s for s in self.train if s.label in self.forget_labels]

    @property
    def retain_train(self) -> list[Spectrogram]:
        return [s for s in self.train if s.label not in self.forget_labels]

    @property
    def num_classes(self) -> int:
        return 1 + max(s.label for s in self.train)

    def with_forget_labels(self, labels) -> "DatasetSplit":
        wanted = frozenset(int(x) for x in labels)
        present = {s.label for s in self.train}
        unknown = wanted - present
        if unknown:
            raise DataError(f"forget labels not in dataset: {sorted(unknown)}")
        return DatasetSplit(train=self.train, test=self.test, forget_labels=wanted)


def stack(samples: list[Spectrogram]) -> tuple[np.ndarray, np.ndarray]:
    """Batch a list of spectrograms into (X, y) arrays."""
    if not samples:
        h = 0
        return np.zeros((0, h, h), dtype=np.float32), np.zeros(0, dtype=np.int64)
    x = np.stack([s.pixels for s in samples]).astype(np.float32)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def _window(cfg: FeaturizeConfig) -> np.ndarray:
    if cfg.window == "hann":
        return np.hanning(cfg.fft_size)
    return np.ones(cfg.fft_size)


def stft(rec, cfg: FeaturizeConfig) -> np.ndarray:
    """Short-time Fourier transform of a recording (or raw complex vector).

    Returns a complex (fft_size, frames) matrix; rows are FFT-shifted so
    frequency 0 sits in the middle, columns are frames at stride hop_size.
    """
    cfg.validate()
    x = rec.samples if isinstance(rec, IQRecording) else np.asarray(rec)
    n = x.size
    if n < cfg.fft_size:
        raise DataError(f"signal of {n} samples is shorter than fft_size {cfg.fft_size}")
    frames = (n - cfg.fft_size) // cfg.hop_size + 1
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop_size * np.arange(frames)[:, None]
    segs = x[idx] * _window(cfg)[None, :]
    return np.fft.fftshift(np.fft.fft(segs, axis=1), axes=1).T


def bilinear_resize(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with corner alignment; identity when sizes match."""
    in_h, in_w = a.shape
    if (in_h, in_w) == (out_h, out_w):
        return a.copy()
    a = np.asarray(a, dtype=np.float64)
    ys = np.linspace(0.0, in_h - 1, out_h) if out_h > 1 else np.array([(in_h - 1) / 2.0])
    xs = np.linspace(0.0, in_w - 1, out_w) if out_w > 1 else np.array([(in_w - 1) / 2.0])
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def to_spectrogram(tf: np.ndarray, cfg: FeaturizeConfig, label: int, source_seed: int = -1) -> Spectrogram:
    """Magnitude (optionally log-scaled), resized to out_size^2, min-max normalized.

    Normalization runs after the resize so the emitted pixels always hit 0
    and 1 exactly (or are all 0.5 when the map is constant).
    """
    cfg.validate()
    tf = np.asarray(tf)
    if tf.size == 0:
        raise DataError("empty time-frequency matrix")
    mag = np.abs(tf).astype(np.float64)
    if cfg.log_magnitude:
        mag = 20.0 * np.log10(mag + cfg.eps)
    mag = bilinear_resize(mag, cfg.out_size, cfg.out_size)
    lo = mag.min()
    hi = mag.max()
    if hi == lo:
        pixels = np.full((cfg.out_size, cfg.out_size), 0.5, dtype=np.float32)
    else:
        pixels = ((mag - lo) / (hi - lo)).astype(np.float32)
    return Spectrogram(pixels=pixels, label=int(label), source_seed=source_seed)


def featurize_recording(rec: IQRecording, cfg: FeaturizeConfig) -> Spectrogram:
    return to_spectrogram(stft(rec, cfg), cfg, rec.device_id, source_seed=rec.seed)


def build_dataset(
    recordings: list[IQRecording],
    cfg: FeaturizeConfig,
    test_fraction: float,
    forget_labels,
    seed: int,
) -> DatasetSplit:
    """Featurize recordings and split per-label into train/test.

    The split is stratified: within each label the recordings are shuffled
    by a seed-derived generator and the first round(test_fraction * count)
    go to the test set.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must be in (0, 1)")
    by_label: dict[int, list[IQRecording]] = {}
    for rec in recordings:
        by_label.setdefault(rec.device_id, []).append(rec)
    for label, recs in sorted(by_label.items()):
        if len(recs) < 2:
            raise DataError(f"label {label} has {len(recs)} recording(s); need >= 2")

    train: list[Spectrogram] = []
    test: list[Spectrogram] = []
    for label in sorted(by_label):
        recs = by_label[label]
        order = np.random.default_rng([seed, label]).permutation(len(recs))
        n_test = int(round(test_fraction * len(recs)))
        n_test = min(max(n_test, 1), len(recs) - 1)
        for pos, idx in enumerate(order):
            sample = featurize_recording(recs[idx], cfg)
            (test if pos < n_test else train).append(sample)
    return DatasetSplit(train=train, test=test).with_forget_labels(forget_labels)


def save_cache(samples: list[Spectrogram], path) -> None:
    """Write spectrograms as a flat binary cache (bit-exact round trip)."""
    if samples:
        h = samples[0].pixels.shape[0]
        for s in samples:
            if s.pixels.shape != (h, h):
                raise DataError("cache requires uniformly sized spectrograms")
    else:
        h = 0
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<III", CACHE_VERSION, h, len(samples)))
        for s in samples:
            if not 0 <= s.label < 2**16:
                raise DataError(f"label {s.label} does not fit in u16")
            f.write(struct.pack("<H", s.label))
            f.write(np.ascontiguousarray(s.pixels, dtype="<f4").tobytes())


def load_cache(path) -> list[Spectrogram]:
    """Read a spectrogram cache; source seeds are not stored and load as -1."""
    with open(path, "rb") as f:
        raw = f.read()
    head = 4 + struct.calcsize("<III")
    if len(raw) < head or raw[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a spectrogram cache")
    version, h, count = struct.unpack("<III", raw[4:head])
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    rec_size = 2 + 4 * h * h
    if len(raw) != head + count * rec_size:
        raise FormatError(f"{path}: truncated or oversized cache")
    samples = []
    off = head
    for _ in range(count):
        (label,) = struct.unpack_from("<H", raw, off)
        pixels = np.frombuffer(raw, dtype="<f4", count=h * h, offset=off + 2)
        samples.append(Spectrogram(pixels=pixels.reshape(h, h).copy(), label=label))
        off += rec_size
    return samples
