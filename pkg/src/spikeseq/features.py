"""WAV ingestion and log-mel filterbank features.

Parsing is restricted to RIFF/WAVE PCM16 so the error taxonomy stays
sharp: malformed container, unsupported codec, and truncated payload are
distinct failures. Feature extraction follows the usual recipe: Hamming
window, magnitude spectrum via FFT (power-of-two size, zero-padded),
triangular filters equally spaced on the mel scale
m = 2595 * log10(1 + f / 700), then a natural log with an absolute floor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-10


class WavError(ValueError):
    """Base class for WAV parsing failures."""


class MalformedWavError(WavError):
    pass


class UnsupportedWavError(WavError):
    pass


class TruncatedWavError(WavError):
    pass


class SampleRateMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray       # float64 in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")


def read_wav(data: bytes) -> AudioClip:
    """Parse a RIFF/WAVE PCM16 byte string (first channel of multichannel
    files)."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError("not a RIFF/WAVE container")
    offset = 12
    fmt = None
    while offset + 8 <= len(data):
        chunk_id = data[offset:offset + 4]
        (chunk_size,) = struct.unpack_from("<I", data, offset + 4)
        body = data[offset + 8:offset + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise MalformedWavError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if fmt is None:
                raise MalformedWavError("data chunk before fmt chunk")
            audio_format, channels, sample_rate, _, _, bits = fmt
            if audio_format != 1:
                raise UnsupportedWavError(
                    f"unsupported codec (format tag {audio_format}); "
                    "only PCM is handled")
            if bits != 16:
                raise UnsupportedWavError(f"only 16-bit PCM, got {bits}-bit")
            if channels < 1:
                raise MalformedWavError("channel count is zero")
            if len(body) < chunk_size:
                raise TruncatedWavError(
                    f"data chunk declares {chunk_size} bytes, "
                    f"{len(body)} present")
            frame_bytes = 2 * channels
            usable = (chunk_size // frame_bytes) * frame_bytes
            raw = np.frombuffer(body[:usable], dtype="<i2")
            first_channel = raw[::channels]
            return AudioClip(samples=first_channel.astype(np.float64)
                             / 32768.0, sample_rate=sample_rate)
        offset += 8 + chunk_size + (chunk_size & 1)
    raise MalformedWavError("no data chunk found")


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    mel_bins: int = 40
    fmin: float = 0.0
    fmax: float | None = None     # defaults to sample_rate / 2
    dft_size: int | None = None   # defaults to next power of two >= frame

    def __post_init__(self):
        if self.mel_bins < 1:
            raise ValueError("mel_bins must be >= 1")
        fmax = self.effective_fmax
        if not 0.0 <= self.fmin < fmax <= self.sample_rate / 2:
            raise ValueError(
                f"need 0 <= fmin < fmax <= nyquist, got "
                f"[{self.fmin}, {fmax}] at rate {self.sample_rate}")
        if self.dft_size is not None:
            if self.dft_size & (self.dft_size - 1):
                raise ValueError("dft_size must be a power of two")
            if self.dft_size < self.frame_samples:
                raise ValueError("dft_size must cover one frame")

    @property
    def effective_fmax(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax

    @property
    def frame_samples(self) -> int:
        return int(round(self.frame_ms * self.sample_rate / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def effective_dft_size(self) -> int:
        if self.dft_size is not None:
            return self.dft_size
        n = 1
        while n < self.frame_samples:
            n *= 2
        return n


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """[mel_bins, dft/2 + 1] triangular weights, edges on the mel scale."""
    nfft = config.effective_dft_size
    freqs = np.arange(nfft // 2 + 1) * config.sample_rate / nfft
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin),
                                  hz_to_mel(config.effective_fmax),
                                  config.mel_bins + 2))
    bank = np.zeros((config.mel_bins, len(freqs)))
    for j in range(config.mel_bins):
        left, center, right = edges[j], edges[j + 1], edges[j + 2]
        rising = (freqs - left) / max(center - left, 1e-12)
        falling = (right - freqs) / max(right - center, 1e-12)
        bank[j] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def frame_count(num_samples: int, win: int, hop: int) -> int:
    return (num_samples - win) // hop + 1


def log_mel(clip: AudioClip, config: FeatureConfig) -> np.ndarray:
    """[frames, mel_bins] log filterbank energies.

    The pipeline never resamples; a clip whose rate differs from the
    configured rate is rejected outright.
    """
    if clip.sample_rate != config.sample_rate:
        raise SampleRateMismatchError(
            f"clip is {clip.sample_rate} Hz, config expects "
            f"{config.sample_rate} Hz")
    win = config.frame_samples
    hop = config.hop_samples
    if len(clip.samples) < win:
        raise ValueError(
            f"clip of {len(clip.samples)} samples is shorter than one "
            f"{win}-sample frame")
    n_frames = frame_count(len(clip.samples), win, hop)
    window = np.hamming(win)
    starts = np.arange(n_frames) * hop
    frames = clip.samples[starts[:, None] + np.arange(win)] * window
    spectrum = np.abs(np.fft.rfft(frames, n=config.effective_dft_size,
                                  axis=1))
    energies = spectrum @ mel_filterbank(config).T
    return np.log(np.maximum(energies, LOG_FLOOR))
