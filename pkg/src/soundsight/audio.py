"""Sound observations: WAV ingestion, tone commands, and MFCC matrices.

Every sound the agent hears is reduced to a fixed ``(frames, coefficients)``
MFCC matrix.  The all-zero matrix is reserved for "no sound"; it is produced
directly by :func:`empty_mfcc` and never by running the pipeline.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np


class WavFormatError(ValueError):
    """Malformed or unsupported WAV file."""


class SignalTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class WaveSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    frame_length: int = 400
    hop: int = 160
    fft_size: int = 512
    mel_filter_count: int = 40
    coefficient_count: int = 13
    target_frames: int = 100
    log_floor: float = 1e-10
    preemphasis: float = 0.97

    def __post_init__(self):
        if self.fft_size < self.frame_length:
            raise ValueError("fft_size must be >= frame_length")
        if self.coefficient_count > self.mel_filter_count:
            raise ValueError("coefficient_count must be <= mel_filter_count")
        if self.target_frames <= 0 or self.hop <= 0 or self.frame_length <= 0:
            raise ValueError("frame parameters must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.target_frames, self.coefficient_count)


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def load_wav(path: str | Path) -> WaveSignal:
    """Read a 16-bit PCM mono RIFF/WAVE file, scaling samples to [-1, 1)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word aligned
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, byte_rate, block_align, bits = fmt
    if audio_format != 1 or bits != 16:
        raise WavFormatError(f"{path}: only 16-bit PCM is supported (format={audio_format}, bits={bits})")
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono, found {channels} channels")
    if sample_rate == 0 or block_align != 2 or byte_rate != sample_rate * 2:
        raise WavFormatError(f"{path}: inconsistent header")
    usable = len(data) - (len(data) % 2)
    samples = np.frombuffer(data[:usable], dtype="<i2").astype(np.float64) / 32768.0
    return WaveSignal(samples, sample_rate)


def save_wav(path: str | Path, signal: WaveSignal) -> None:
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as out:
        out.setnchannels(1)
        out.setsampwidth(2)
        out.setframerate(signal.sample_rate)
        out.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# tone commands
# ---------------------------------------------------------------------------

# C4 D4 E4 F4 G4 A4 B4 C5
DEFAULT_NOTES = (60, 62, 64, 65, 67, 69, 71, 72)
HARMONICS = 8


def midi_to_hz(note: int) -> float:
    return 440.0 * 2.0 ** ((note - 69) / 12.0)


def fundamental(intent: int, notes: tuple[int, ...] = DEFAULT_NOTES) -> float:
    if not 0 <= intent < len(notes):
        raise ValueError(f"intent {intent} out of range for {len(notes)} configured notes")
    return midi_to_hz(notes[intent])


@lru_cache(maxsize=64)
def timbre_profile(timbre: int) -> np.ndarray:
    """Base harmonic amplitudes of a 'speaker'.  Timbre 0 is a plain
    1/k roll-off; other timbres draw a random spectral shape."""
    k = np.arange(1, HARMONICS + 1, dtype=np.float64)
    if timbre == 0:
        profile = 1.0 / k
    else:
        rng = np.random.default_rng([7919, timbre])
        profile = k ** -rng.uniform(0.2, 0.8) * rng.uniform(0.3, 1.0, HARMONICS)
        # odd/even emphasis gives distinct formant-like envelopes
        profile[1::2] *= rng.uniform(0.2, 1.0)
    profile = profile / profile[0]
    profile[1:] = np.minimum(profile[1:], 0.6)
    profile.flags.writeable = False
    return profile


def synth_command(intent: int, seed: int, *, sample_rate: int = 16000,
                  notes: tuple[int, ...] = DEFAULT_NOTES, timbre: int = 0) -> WaveSignal:
    """Harmonic tone whose fundamental encodes ``intent``.

    ``seed`` jitters the harmonic amplitudes, duration (0.7-1.0 s), volume,
    and attack/decay envelope; the output is a pure function of
    ``(intent, seed, timbre)``.
    """
    f0 = fundamental(intent, notes)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, intent, timbre])
    duration = rng.uniform(0.7, 1.0)
    volume = rng.uniform(0.3, 0.9)
    attack = rng.uniform(0.005, 0.05)
    decay = rng.uniform(0.5, 3.0)
    amps = timbre_profile(timbre) * np.exp(rng.normal(0.0, 0.25, HARMONICS))
    amps[0] = 1.0
    amps[1:] = np.minimum(amps[1:], 0.6)
    phases = rng.uniform(0, 2 * np.pi, HARMONICS)

    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    nyquist = sample_rate / 2
    wave_ = np.zeros(n)
    for h in range(HARMONICS):
        freq = f0 * (h + 1)
        if freq >= nyquist:
            break
        wave_ += amps[h] * np.sin(2 * np.pi * freq * t + phases[h])
    envelope = np.minimum(t / attack, 1.0) * np.exp(-decay * t)
    release = np.clip((duration - t) / 0.02, 0.0, 1.0)
    wave_ *= envelope * release
    peak = np.max(np.abs(wave_))
    if peak > 0:
        wave_ *= volume / peak
    return WaveSignal(wave_, sample_rate)


# ---------------------------------------------------------------------------
# MFCC
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MfccConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.mel_filter_count + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """Triangular filters evenly spaced in mel from 0 Hz to Nyquist,
    shape ``(mel_filter_count, fft_size // 2 + 1)``."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.mel_filter_count + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.flags.writeable = False
    return bank


@lru_cache(maxsize=8)
def dct_matrix(size: int, keep: int) -> np.ndarray:
    """Rows of the orthonormal DCT-II basis, ``(keep, size)``."""
    n = np.arange(size)
    k = np.arange(keep)[:, None]
    basis = np.cos(np.pi * k * (2 * n + 1) / (2 * size)) * np.sqrt(2.0 / size)
    basis[0] /= np.sqrt(2.0)
    basis.flags.writeable = False
    return basis


def _power_frames(signal: WaveSignal, cfg: MfccConfig) -> np.ndarray:
    if signal.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {signal.sample_rate} does not match config {cfg.sample_rate}")
    x = np.asarray(signal.samples, dtype=np.float64)
    if len(x) < cfg.frame_length:
        raise SignalTooShortError(f"{len(x)} samples is shorter than one frame ({cfg.frame_length})")
    emphasized = np.empty_like(x)
    emphasized[0] = x[0]
    emphasized[1:] = x[1:] - cfg.preemphasis * x[:-1]
    count = 1 + (len(x) - cfg.frame_length) // cfg.hop
    frames = np.lib.stride_tricks.sliding_window_view(emphasized, cfg.frame_length)[:: cfg.hop][:count]
    spectrum = np.fft.rfft(frames * np.hamming(cfg.frame_length), n=cfg.fft_size)
    return spectrum.real ** 2 + spectrum.imag ** 2


def filterbank_energies(signal: WaveSignal, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Mel filterbank energies per frame, before the log."""
    return _power_frames(signal, cfg) @ mel_filterbank(cfg).T


def compute_mfcc(signal: WaveSignal, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    energies = filterbank_energies(signal, cfg)
    log_energies = np.log(np.maximum(energies, cfg.log_floor))
    coeffs = log_energies @ dct_matrix(cfg.mel_filter_count, cfg.coefficient_count).T
    frames = cfg.target_frames
    if len(coeffs) >= frames:
        return coeffs[:frames].copy()
    pad = np.repeat(coeffs[-1:], frames - len(coeffs), axis=0)
    return np.concatenate([coeffs, pad], axis=0)


def empty_mfcc(cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    return np.zeros(cfg.shape)


def is_empty_sound(mfcc: np.ndarray) -> bool:
    return not np.any(mfcc)
