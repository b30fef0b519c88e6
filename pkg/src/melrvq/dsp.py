"""Audio ingestion and log-Mel features at a 25 Hz frame rate."""

import struct
import warnings
from dataclasses import asdict, dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly
from sklearn.base import BaseEstimator, TransformerMixin

from ._envelope import Reader, open_envelope, seal
from .errors import DomainError, FormatError, ShapeError, TooShortError, UnsupportedCodecError

MELS_MAGIC = b"MELS"
MELS_VERSION = 1


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeError(f"expected mono samples, got shape {samples.shape}")
        if int(self.sample_rate_hz) <= 0:
            raise DomainError("sample_rate_hz must be positive")
        if not np.all(np.isfinite(samples)):
            raise DomainError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    @property
    def duration_s(self):
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ShapeError(f"expected T x M frames, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise DomainError("spectrogram contains non-finite entries")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "frame_rate_hz", float(self.frame_rate_hz))

    @property
    def mel_bins(self):
        return self.frames.shape[1]

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class DspConfig:
    """STFT / Mel settings. Defaults give 128 bins at 25 Hz from 24 kHz audio."""

    sample_rate_hz: int = 24000
    n_fft: int = 1024
    hop_length: int = 240
    n_mels: int = 128
    f_min_hz: float = 0.0
    f_max_hz: float = 12000.0
    pool_factor: int = 4
    log_floor: float = 1e-5

    def __post_init__(self):
        for name in ("sample_rate_hz", "n_fft", "hop_length", "n_mels", "pool_factor"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be a positive integer")
        if not 0 <= self.f_min_hz < self.f_max_hz <= self.sample_rate_hz / 2:
            raise DomainError("need 0 <= f_min < f_max <= Nyquist")
        if self.log_floor <= 0:
            raise DomainError("log_floor must be positive")

    @property
    def frame_rate_hz(self):
        return self.sample_rate_hz / self.hop_length / self.pool_factor

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class InputStats:
    """Per-bin mean/std used to standardize frames before quantization."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        std = np.asarray(self.std, dtype=np.float64).ravel()
        if mean.shape != std.shape:
            raise ShapeError("mean and std must have the same length")
        if np.any(std <= 0) or not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise DomainError("std must be positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, frames, min_std=1e-6):
        frames = np.asarray(frames, dtype=np.float64)
        return cls(frames.mean(axis=0), np.maximum(frames.std(axis=0), min_std))

    @property
    def dim(self):
        return self.mean.shape[0]

    def standardize(self, frames):
        return (np.asarray(frames, dtype=np.float64) - self.mean) / self.std

    def destandardize(self, frames):
        return np.asarray(frames, dtype=np.float64) * self.std + self.mean


def load_wav(path):
    """Read a 16-bit PCM or 32-bit float WAV file as a mono clip in [-1, 1]."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    # scipy leaves its locals unbound on a header with no chunks
    except (ValueError, struct.error, EOFError, UnboundLocalError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedCodecError(f"{path}: unsupported sample type {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioClip(samples, rate)


def write_wav(path, clip, encoding="pcm16"):
    if encoding == "pcm16":
        data = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    elif encoding == "float32":
        data = clip.samples.astype(np.float32)
    else:
        raise UnsupportedCodecError(encoding)
    wavfile.write(path, clip.sample_rate_hz, data)


def resample(clip, target_hz):
    """Polyphase windowed-sinc resampling; returns ``clip`` itself when rates match."""
    target_hz = int(target_hz)
    if target_hz <= 0:
        raise DomainError("target_hz must be positive")
    if target_hz == clip.sample_rate_hz:
        return clip
    g = gcd(target_hz, clip.sample_rate_hz)
    out = resample_poly(clip.samples, target_hz // g, clip.sample_rate_hz // g, padtype="line")
    return AudioClip(out, target_hz)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg):
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg):
    """Triangular HTK filters, shape (n_mels, n_fft // 2 + 1), unit peak."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz), cfg.n_mels + 2))
    fft_hz = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate_hz / cfg.n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_hz - lower) / (center - lower)
    falling = (upper - fft_hz) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def power_spectrogram(samples, cfg):
    """Centered (zero-padded) Hann STFT power, shape (frames, n_fft // 2 + 1)."""
    if len(samples) < cfg.n_fft:
        raise TooShortError(f"{len(samples)} samples is shorter than one {cfg.n_fft}-sample window")
    pad = cfg.n_fft // 2
    padded = np.pad(samples, pad)
    n_frames = 1 + len(samples) // cfg.hop_length
    windows = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft)[::cfg.hop_length][:n_frames]
    spec = np.fft.rfft(windows * get_window("hann", cfg.n_fft, fftbins=True), axis=1)
    return spec.real ** 2 + spec.imag ** 2


def pool_frames(frames, factor):
    """Mean over consecutive groups of ``factor`` rows; an incomplete tail is dropped."""
    n = frames.shape[0] // factor
    return frames[: n * factor].reshape(n, factor, -1).mean(axis=1)


def mel_spectrogram(clip, cfg=None):
    cfg = cfg or DspConfig()
    if clip.sample_rate_hz != cfg.sample_rate_hz:
        raise DomainError(
            f"clip is at {clip.sample_rate_hz} Hz, config expects {cfg.sample_rate_hz} Hz; resample first"
        )
    power = power_spectrogram(clip.samples, cfg)
    logmel = np.log(power @ mel_filterbank(cfg).T + cfg.log_floor)
    return MelSpectrogram(pool_frames(logmel, cfg.pool_factor), cfg.frame_rate_hz)


def save_mels(spec, path):
    t, m = spec.frames.shape
    payload = struct.pack("<IIf", t, m, spec.frame_rate_hz) + spec.frames.astype("<f4").tobytes()
    Path(path).write_bytes(seal(MELS_MAGIC, MELS_VERSION, payload))


def load_mels(path):
    r = Reader(open_envelope(Path(path).read_bytes(), MELS_MAGIC, MELS_VERSION))
    t, m, rate = r.unpack("<IIf")
    frames = np.frombuffer(r.take(4 * t * m), dtype="<f4").reshape(t, m)
    r.done()
    return MelSpectrogram(frames.astype(np.float64), rate)


class MelFeaturizer(TransformerMixin, BaseEstimator):
    """Clips in, log-Mel frame matrices out.

    ``fit`` learns per-bin standardization statistics over the whole corpus;
    ``transform`` does not apply them (the quantizer does), so featurization
    stays usable before any statistics exist.
    """

    def __init__(self, sample_rate_hz=24000, n_fft=1024, hop_length=240, n_mels=128,
                 f_min_hz=0.0, f_max_hz=12000.0, pool_factor=4, log_floor=1e-5):
        self.sample_rate_hz = sample_rate_hz
        self.n_fft = n_fft
        self.hop_length = hop_length
        self.n_mels = n_mels
        self.f_min_hz = f_min_hz
        self.f_max_hz = f_max_hz
        self.pool_factor = pool_factor
        self.log_floor = log_floor

    def config(self):
        return DspConfig(**self.get_params())

    def _featurize(self, clip):
        cfg = self.config()
        if not isinstance(clip, AudioClip):
            clip = AudioClip(clip, cfg.sample_rate_hz)
        return mel_spectrogram(resample(clip, cfg.sample_rate_hz), cfg)

    def fit(self, X, y=None):
        frames = np.concatenate([self._featurize(c).frames for c in X])
        self.stats_ = InputStats.fit(frames)
        self.n_features_out_ = frames.shape[1]
        return self

    def transform(self, X):
        return [self._featurize(c) for c in X]
