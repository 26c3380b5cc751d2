"""Synthetic speech and the audio feature pipeline.

waveform -> log-Mel spectrogram -> two-convolution stem -> transformer encoder.
Each vocabulary token is voiced as a two-tone chord; one pitch-shift factor
per utterance stands in for speaker variation.
"""

from __future__ import annotations

import functools
import math
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, DimensionError, FormatError
from .nn import LayerNorm, Module, Parameter, TransformerLayer, sinusoidal_positions
from .numcore import Rng, Tensor, ops

LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise DataError("waveform amplitude exceeds 1")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray  # frames x n_mels, natural-log energies
    hop: int
    n_fft: int
    n_mels: int

    @property
    def frames(self) -> int:
        return self.values.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class SynthSpec:
    """Token -> (f1, f2) chord map plus rendering settings."""

    freqs: dict[int, tuple[float, float]]
    tone_ms: float = 60.0
    noise: float = 0.01
    pitch_range: tuple[float, float] = (0.9, 1.1)
    amplitude: float = 0.4
    sample_rate: int = 16000

    def __post_init__(self):
        chords = {tuple(sorted(v)) for v in self.freqs.values()}
        if len(chords) != len(self.freqs):
            raise DataError("token frequency signatures are not pairwise distinct")
        lo, hi = self.pitch_range
        if not 0 < lo <= hi:
            raise DataError(f"bad pitch range {self.pitch_range}")

    @property
    def tone_samples(self) -> int:
        return int(round(self.tone_ms * self.sample_rate / 1000.0))


def default_synth_spec(tokens: Sequence[int], sample_rate: int = 16000, f_lo: float = 250.0,
                       f_hi: float = 5500.0, **kwargs) -> SynthSpec:
    """Assign each token a distinct pair of base tones spaced evenly on the mel scale."""
    tokens = list(tokens)
    k = 2
    while k * (k - 1) // 2 < len(tokens):
        k += 1
    base = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), k))
    pairs = [(i, j) for gap in range(1, k) for i in range(k - gap) for j in (i + gap,)]
    freqs = {tok: (float(base[i]), float(base[j])) for tok, (i, j) in zip(tokens, pairs)}
    return SynthSpec(freqs=freqs, sample_rate=sample_rate, **kwargs)


def synth_utterance(tokens: Sequence[int], spec: SynthSpec, rng: Rng,
                    pitch_shift: float | None = None) -> Waveform:
    """Concatenate one chord per token; one pitch factor per utterance; additive white noise."""
    for t in tokens:
        if int(t) not in spec.freqs:
            raise DataError(f"token {int(t)} has no acoustic signature")
    n = spec.tone_samples
    lo, hi = spec.pitch_range
    shift = float(rng.uniform(lo, hi)) if pitch_shift is None else float(pitch_shift)
    if not tokens:
        return Waveform(np.zeros(0), spec.sample_rate)
    time = np.arange(n) / spec.sample_rate
    pieces = []
    for t in tokens:
        f1, f2 = spec.freqs[int(t)]
        pieces.append(spec.amplitude * (np.sin(2 * np.pi * f1 * shift * time)
                                        + np.sin(2 * np.pi * f2 * shift * time)))
    samples = np.concatenate(pieces)
    if spec.noise > 0:
        samples = samples + rng.normal(samples.shape, std=spec.noise)
    return Waveform(np.clip(samples, -1.0, 1.0), spec.sample_rate)


def pad_waveform(w: Waveform, n_samples: int, side: str = "right") -> Waveform:
    """Pad with silence (or truncate) to a fixed length. ``side="left"`` puts the silence
    first so the utterance ends exactly at the end of the window."""
    if side not in ("left", "right"):
        raise DataError(f"pad side must be 'left' or 'right', got {side!r}")
    if side == "right":
        s = w.samples[:n_samples]
        if s.size < n_samples:
            s = np.concatenate([s, np.zeros(n_samples - s.size)])
    else:
        s = w.samples[max(0, w.samples.size - n_samples):]
        if s.size < n_samples:
            s = np.concatenate([np.zeros(n_samples - s.size), s])
    return Waveform(s, w.sample_rate)


@functools.lru_cache(maxsize=16)
def mel_filterbank(n_fft: int, n_mels: int, sample_rate: int) -> np.ndarray:
    """Triangular filters (n_mels x n_fft//2+1), unit peak, spanning 0 Hz to Nyquist."""
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, bin_hz.size))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (bin_hz - lo) / (c - lo)
        fall = (hi - bin_hz) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(rise, fall))
    fb.setflags(write=False)
    return fb


def mel_centers(n_mels: int, sample_rate: int) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))[1:-1]


def frame_count(n_samples: int, n_fft: int, hop: int) -> int:
    return (n_samples - n_fft) // hop + 1


def mel_spectrogram(w: Waveform, n_fft: int = 400, hop: int = 160, n_mels: int = 16) -> MelSpectrogram:
    """Hann-windowed power spectrum per frame, mel filterbank, floor at 1e-10, natural log."""
    if len(w) < n_fft:
        raise DataError(f"waveform has {len(w)} samples, fewer than n_fft={n_fft}")
    n_frames = frame_count(len(w), n_fft, hop)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    window = np.hanning(n_fft + 1)[:-1]  # periodic Hann
    spec = np.abs(np.fft.rfft(w.samples[idx] * window, axis=-1)) ** 2
    energies = spec @ mel_filterbank(n_fft, n_mels, w.sample_rate).T
    return MelSpectrogram(np.log(np.maximum(energies, LOG_FLOOR)), hop, n_fft, n_mels)


def normalize_log_mel(values: np.ndarray) -> np.ndarray:
    """Fixed affine rescale of natural-log energies to roughly [-2, 2] (log10, +4, /4)."""
    return ((values / math.log(10.0) + 4.0) / 4.0).astype(np.float32)


def token_distinguishability(spec: SynthSpec, n_fft: int = 400, hop: int = 160,
                             n_mels: int = 16) -> float:
    """Smallest, over token pairs, of the largest per-bin gap in mean log-mel energy
    (zero noise, no pitch shift)."""
    quiet = SynthSpec(spec.freqs, spec.tone_ms, 0.0, spec.pitch_range, spec.amplitude,
                      spec.sample_rate)
    rng = Rng(0)
    feats = []
    for tok in spec.freqs:
        w = synth_utterance([tok], quiet, rng, pitch_shift=1.0)
        if len(w) < n_fft:
            w = pad_waveform(w, n_fft)
        feats.append(mel_spectrogram(w, n_fft, hop, n_mels).values.mean(axis=0))
    feats = np.array(feats)
    gaps = np.abs(feats[:, None, :] - feats[None, :, :]).max(axis=-1)
    np.fill_diagonal(gaps, np.inf)
    return float(gaps.min())


# -- encoder ------------------------------------------------------------------------

class AudioEncoder(Module):
    """Two-convolution stem + sinusoidal positions + pre-norm transformer stack + final norm."""

    def __init__(self, n_mels: int, width: int, n_layers: int, heads: int, rng: Rng,
                 dtype=np.float32):
        self.conv1_w = Parameter(rng.spawn("conv1").normal((3, n_mels, width),
                                                           std=1 / math.sqrt(3 * n_mels)).astype(dtype))
        self.conv1_b = Parameter(np.zeros(width, dtype=dtype))
        self.conv2_w = Parameter(rng.spawn("conv2").normal((3, width, width),
                                                           std=1 / math.sqrt(3 * width)).astype(dtype))
        self.conv2_b = Parameter(np.zeros(width, dtype=dtype))
        self.layers = [TransformerLayer(width, heads, rng.spawn(("layer", i)), n_layers=n_layers,
                                        dtype=dtype) for i in range(n_layers)]
        self.ln_post = LayerNorm(width, dtype=dtype)
        self.n_mels = n_mels
        self.width = width

    def __call__(self, features) -> Tensor:
        """Normalised log-mel features (..., T, n_mels) -> audio embeddings (..., T', width)."""
        x = conv_stem(features, self)
        for layer in self.layers:
            x = layer(x)
        return self.ln_post(x)


def conv_stem(features, encoder: AudioEncoder) -> Tensor:
    """conv(K=3, s=1) + GELU, conv(K=3, s=2) + GELU, plus sinusoidal positions."""
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=encoder.conv1_w.dtype))
    if x.shape[-1] != encoder.n_mels:
        raise DimensionError(f"stem expects {encoder.n_mels} mel bins, got {x.shape[-1]}")
    x = ops.gelu(ops.conv1d(x, encoder.conv1_w, encoder.conv1_b, stride=1, padding=1))
    x = ops.gelu(ops.conv1d(x, encoder.conv2_w, encoder.conv2_b, stride=2, padding=1))
    return x + sinusoidal_positions(x.shape[-2], encoder.width, dtype=x.dtype)


def encode_audio(w: Waveform, encoder: AudioEncoder, n_fft: int = 400, hop: int = 160) -> Tensor:
    mel = mel_spectrogram(w, n_fft, hop, encoder.n_mels)
    return encoder(normalize_log_mel(mel.values))


def stem_length(frames: int) -> int:
    return (frames + 1) // 2


# -- WAV I/O ----------------------------------------------------------------------

def write_wav(path: str | Path, w: Waveform) -> None:
    """Mono 16-bit little-endian PCM."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise FormatError(f"{path}: expected mono 16-bit PCM")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: {exc}") from exc
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(np.clip(pcm, -1.0, 1.0), rate)

