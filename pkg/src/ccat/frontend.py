"""Audio decoding and context-aware log-spectrogram features.

Pipeline: WAV -> mono 16 kHz waveform -> log-magnitude STFT or mel
spectrogram (T x F) -> context tensor (T x F x C) with C = 2n + 1 stacked
neighbouring frames, zero-padded at the edges.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import ConfigError, ParseError, TooShort, UnsupportedFormat

TARGET_RATE = 16000

_PCM = 0x0001
_IEEE_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.size == 0:
            raise ValueError("waveform has no samples")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")


@dataclass
class FeatureConfig:
    kind: str = "STFT"
    window_ms: float = 32.0
    hop_ms: float = 16.0
    fft_size: int = 512
    mel_bands: int = 48
    context_half_width: int = 5
    log_floor: float = 1e-10
    sample_rate: int = TARGET_RATE

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in ("STFT", "MEL"):
            raise ConfigError(f"feature kind must be STFT or MEL, got {self.kind!r}")
        if self.fft_size < 1 or self.fft_size & (self.fft_size - 1):
            raise ConfigError("fft_size must be a power of two")
        if self.fft_size < self.window_samples:
            raise ConfigError("fft_size must be >= window length in samples")
        if self.hop_samples < 1:
            raise ConfigError("hop must be at least one sample")
        if self.kind == "MEL" and self.mel_bands < 1:
            raise ConfigError("mel_bands must be >= 1")
        if self.context_half_width < 0:
            raise ConfigError("context_half_width must be >= 0")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def context_size(self) -> int:
        return 2 * self.context_half_width + 1

    @property
    def num_bins(self) -> int:
        return self.mel_bands if self.kind == "MEL" else self.fft_size // 2 + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown feature config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LogSpectrogram:
    frames: np.ndarray  # T x F

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def F(self) -> int:
        return self.frames.shape[1]


@dataclass
class ContextTensor:
    data: np.ndarray  # T x F x C
    valid_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.data.shape[0], dtype=bool)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.valid_mask.shape != (self.data.shape[0],):
            raise ValueError("valid_mask length must equal frame count")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def F(self) -> int:
        return self.data.shape[1]

    @property
    def C(self) -> int:
        return self.data.shape[2]

    def padded(self, extra: int) -> "ContextTensor":
        """Append ``extra`` all-zero frames marked invalid."""
        pad = np.zeros((extra,) + self.data.shape[1:], dtype=self.data.dtype)
        return ContextTensor(np.concatenate([self.data, pad]),
                             np.concatenate([self.valid_mask, np.zeros(extra, dtype=bool)]))


# --------------------------------------------------------------------- WAV I/O

def _parse_chunks(buf: bytes) -> dict[bytes, bytes]:
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise ParseError("not a RIFF/WAVE file")
    chunks: dict[bytes, bytes] = {}
    pos = 12
    while pos + 8 <= len(buf):
        cid, size = struct.unpack("<4sI", buf[pos:pos + 8])
        body = buf[pos + 8:pos + 8 + size]
        if len(body) < size and cid in (b"fmt ", b"data"):
            if cid == b"fmt ":
                raise ParseError("truncated fmt chunk")
            # tolerate a data chunk whose declared size overruns the file
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    if b"fmt " not in chunks:
        raise ParseError("missing fmt chunk")
    if b"data" not in chunks:
        raise ParseError("missing data chunk")
    return chunks


def decode_wav(buf: bytes) -> Waveform:
    """Decode RIFF/WAVE bytes (PCM16 or float32) to a mono waveform at its native rate."""
    chunks = _parse_chunks(buf)
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise ParseError("fmt chunk shorter than 16 bytes")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _EXTENSIBLE:
        if len(fmt) < 40:
            raise ParseError("extensible fmt chunk too short")
        tag = struct.unpack("<H", fmt[24:26])[0]
    if channels < 1 or rate < 1:
        raise ParseError(f"invalid channel count {channels} or sample rate {rate}")
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedFormat(f"format tag {tag:#06x} with {bits} bits is not supported")
    data = chunks[b"data"]
    frame_bytes = dtype.itemsize * channels
    usable = len(data) - len(data) % frame_bytes
    if usable == 0:
        raise ParseError("data chunk holds no complete sample frames")
    raw = np.frombuffer(data[:usable], dtype=dtype).astype(np.float64) * scale
    mono = raw.reshape(-1, channels).mean(axis=1)
    if not np.all(np.isfinite(mono)):
        raise ParseError("non-finite sample values")
    return Waveform(np.clip(mono, -1.0, 1.0), int(rate))


def resample_linear(w: Waveform, rate: int = TARGET_RATE) -> Waveform:
    if w.sample_rate == rate:
        return w
    n_in = w.samples.size
    n_out = (n_in - 1) * rate // w.sample_rate + 1
    t_out = np.arange(n_out) * (w.sample_rate / rate)
    return Waveform(np.interp(t_out, np.arange(n_in), w.samples), rate)


def load_wav(path: str | Path) -> Waveform:
    """Read a WAV file, downmix to mono and resample to 16 kHz."""
    return resample_linear(decode_wav(Path(path).read_bytes()), TARGET_RATE)


def save_wav(path: str | Path, samples, sample_rate: int = TARGET_RATE,
             float32: bool = False) -> None:
    """Write a PCM16 (default) or float32 WAV. ``samples`` is (n,) or (n, channels)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if float32:
        tag, bits, payload = _IEEE_FLOAT, 32, x.astype("<f4").tobytes()
    else:
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        tag, bits, payload = _PCM, 16, q.tobytes()
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# -------------------------------------------------------------------- spectra

def hann_window(n: int) -> np.ndarray:
    # periodic Hann, the usual choice for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(num_samples: int, cfg: FeatureConfig) -> int:
    win = cfg.window_samples
    if num_samples < win:
        return 0
    return (num_samples - win) // cfg.hop_samples + 1


def magnitude_frames(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """|STFT| with no centre padding, shape (T, fft_size // 2 + 1)."""
    if w.sample_rate != cfg.sample_rate:
        w = resample_linear(w, cfg.sample_rate)
    win = cfg.window_samples
    T = frame_count(w.samples.size, cfg)
    if T == 0:
        raise TooShort(f"{w.samples.size} samples is shorter than one {win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::cfg.hop_samples][:T]
    return np.abs(np.fft.rfft(frames * hann_window(win), n=cfg.fft_size, axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """HTK-scale triangular filters spanning 0 Hz to Nyquist, shape (mel_bands, bins)."""
    n_bins = cfg.fft_size // 2 + 1
    freqs = np.linspace(0.0, cfg.sample_rate / 2.0, n_bins)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2.0), cfg.mel_bands + 2))
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    return np.maximum(0.0, np.minimum(up, down))


def stft_log_magnitude(w: Waveform, cfg: FeatureConfig) -> LogSpectrogram:
    if cfg.kind != "STFT":
        raise ConfigError("stft_log_magnitude requires kind=STFT")
    mag = magnitude_frames(w, cfg)
    return LogSpectrogram(np.log(np.maximum(mag, cfg.log_floor)))


def mel_log_magnitude(w: Waveform, cfg: FeatureConfig) -> LogSpectrogram:
    if cfg.kind != "MEL":
        raise ConfigError("mel_log_magnitude requires kind=MEL")
    mel = magnitude_frames(w, cfg) @ mel_filterbank(cfg).T
    return LogSpectrogram(np.log(np.maximum(mel, cfg.log_floor)))


def log_spectrogram(w: Waveform, cfg: FeatureConfig) -> LogSpectrogram:
    if cfg.kind == "MEL":
        return mel_log_magnitude(w, cfg)
    return stft_log_magnitude(w, cfg)


def make_context(spec: LogSpectrogram, n: int) -> ContextTensor:
    """Stack n past and n future frames around every frame (channel order past -> future)."""
    if n < 0:
        raise ValueError("context half width must be >= 0")
    x = spec.frames
    T, F = x.shape
    padded = np.zeros((T + 2 * n, F), dtype=x.dtype)
    padded[n:n + T] = x
    data = np.stack([padded[j:j + T] for j in range(2 * n + 1)], axis=-1)
    return ContextTensor(data)


def extract_features(w: Waveform, cfg: FeatureConfig) -> ContextTensor:
    return make_context(log_spectrogram(w, cfg), cfg.context_half_width)


# ----------------------------------------------------------------- disk cache

def save_feature_cache(path: str | Path, ct: ContextTensor, cfg: FeatureConfig) -> None:
    meta = {"kind": "features", "feature": cfg.to_dict(), "config_hash": cfg.digest()}
    container.write(path, meta, [("features", ct.data.astype(np.float32)),
                                 ("mask", ct.valid_mask.astype(np.uint8))])


def load_feature_cache(path: str | Path) -> tuple[ContextTensor, dict]:
    meta, tensors = container.read(path)
    return ContextTensor(tensors["features"], tensors["mask"].astype(bool)), meta
