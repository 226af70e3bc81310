"""Voice conversions and SNR-controlled additive noise.

Three conversions (resampling, speed, pitch) plus noise mixing at a
target signal-to-noise ratio. Identity parameters (offset 0, rate 1.0,
n_steps 0) return the input samples bit-for-bit. Everything here is
deterministic; there is no internal randomness outside the explicit
noise-bank generator seeds.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import FLOAT32, Waveform, istft, load_wav, rms, save_wav, stft

STFT_WINDOW = 2048
STFT_HOP = 512

PAPER = "paper"
STANDARD = "standard"

# Kaiser-windowed sinc interpolation: 32 taps each side of the output
# position, measured in input samples.
_TAPS = 32
_KAISER_BETA = 8.0

NOISE_CLASSES = (
    ("indoor", "breathing"),
    ("indoor", "footsteps"),
    ("indoor", "laughing"),
    ("indoor", "mouse-click"),
    ("indoor", "keyboard-type"),
    ("indoor", "clock-tick"),
    ("outdoor", "engine"),
    ("outdoor", "train"),
    ("outdoor", "fireworks"),
    ("outdoor", "rain"),
    ("outdoor", "wind"),
    ("outdoor", "thunderstorm"),
)


def _kaiser_taper(t: np.ndarray) -> np.ndarray:
    inside = np.abs(t) <= _TAPS
    arg = np.where(inside, 1.0 - (t / _TAPS) ** 2, 0.0)
    return np.where(inside, np.i0(_KAISER_BETA * np.sqrt(arg)) / np.i0(_KAISER_BETA), 0.0)


def _resample_by_ratio(samples: np.ndarray, ratio: float) -> np.ndarray:
    """Windowed-sinc rate conversion; output length round(len * ratio)."""
    n_in = samples.size
    n_out = int(round(n_in * ratio))
    if n_out < 1:
        raise ValueError("resampling ratio leaves no output samples")
    cutoff = min(1.0, ratio)
    offsets = np.arange(-_TAPS, _TAPS + 2)
    out = np.empty(n_out, dtype=np.float64)
    for start in range(0, n_out, 8192):
        stop = min(start + 8192, n_out)
        pos = np.arange(start, stop, dtype=np.float64) / ratio
        idx = np.floor(pos).astype(np.int64)[:, None] + offsets[None, :]
        t = idx - pos[:, None]
        kernel = cutoff * np.sinc(cutoff * t) * _kaiser_taper(t)
        valid = (idx >= 0) & (idx < n_in)
        gathered = np.where(valid, samples[np.clip(idx, 0, n_in - 1)], 0.0)
        out[start:stop] = np.sum(gathered * kernel, axis=1)
    return out


def resample(w: Waveform, offset_hz: int) -> Waveform:
    """Rate conversion to sample_rate + offset_hz; the output carries the new rate."""
    offset_hz = int(offset_hz)
    new_rate = w.sample_rate + offset_hz
    if new_rate <= 0:
        raise ValueError(f"target sample rate {new_rate} is not positive")
    if offset_hz == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    return Waveform(_resample_by_ratio(w.samples, new_rate / w.sample_rate), new_rate)


def _phase_vocoder(spec: np.ndarray, rate: float) -> np.ndarray:
    n_frames, n_bins = spec.shape
    steps = np.arange(0.0, n_frames, rate)
    omega = 2.0 * np.pi * STFT_HOP * np.arange(n_bins) / STFT_WINDOW
    padded = np.vstack([spec, np.zeros((1, n_bins), dtype=spec.dtype)])
    out = np.empty((steps.size, n_bins), dtype=spec.dtype)
    phase = np.angle(padded[0])
    for i, step in enumerate(steps):
        p = int(step)
        alpha = step - p
        d0 = padded[p]
        d1 = padded[p + 1]
        mag = (1.0 - alpha) * np.abs(d0) + alpha * np.abs(d1)
        out[i] = mag * np.exp(1j * phase)
        dphase = np.angle(d1) - np.angle(d0) - omega
        dphase -= 2.0 * np.pi * np.round(dphase / (2.0 * np.pi))
        phase = phase + omega + dphase
    return out


def time_stretch(w: Waveform, rate: float) -> Waveform:
    """Phase-vocoder stretch; output has exactly round(len/rate) samples."""
    rate = float(rate)
    if rate <= 0.0:
        raise ValueError("stretch rate must be positive")
    if rate == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    if len(w) < STFT_WINDOW:
        raise ValueError(f"signal shorter than one {STFT_WINDOW}-sample analysis window")
    spec = stft(w, STFT_WINDOW, STFT_HOP)
    stretched = _phase_vocoder(spec, rate)
    target = int(round(len(w) / rate))
    samples = istft(stretched, STFT_WINDOW, STFT_HOP, length=target)
    return Waveform(samples, w.sample_rate)


def pitch_shift(w: Waveform, n_steps: int, bins_per_octave: int = 12) -> Waveform:
    """Shift pitch by n_steps semitones; duration and rate are preserved."""
    if bins_per_octave < 1:
        raise ValueError("bins_per_octave must be positive")
    if n_steps == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    rate = 2.0 ** (-float(n_steps) / bins_per_octave)
    stretched = time_stretch(w, rate)
    shifted = _resample_by_ratio(stretched.samples, rate)
    if shifted.size >= len(w):
        samples = shifted[: len(w)]
    else:
        samples = np.concatenate([shifted, np.zeros(len(w) - shifted.size)])
    return Waveform(samples, w.sample_rate)


def _fit_to_length(noise: np.ndarray, n: int) -> np.ndarray:
    """Tile end-to-end when short, truncate from the start when long."""
    if noise.size >= n:
        return noise[:n]
    reps = math.ceil(n / noise.size)
    return np.tile(noise, reps)[:n]


def mix_noise(signal: Waveform, noise: Waveform, target_snr_db: float, formula: str = PAPER) -> Waveform:
    """Add noise scaled so the chosen SNR formula hits target_snr_db.

    `paper` measures SNR as 40*log10(rms_signal/rms_noise); `standard`
    uses the usual divisor of 20. The mix is never clipped, only warned
    about when it leaves [-1, 1].
    """
    if signal.sample_rate != noise.sample_rate:
        raise ValueError(
            f"sample rates differ: signal {signal.sample_rate}, noise {noise.sample_rate}"
        )
    if formula not in (PAPER, STANDARD):
        raise ValueError(f"unknown SNR formula {formula!r}")
    fitted = _fit_to_length(noise.samples, len(signal))
    rms_s = rms(signal)
    rms_n = float(np.sqrt(np.mean(fitted**2)))
    if rms_s == 0.0:
        raise ValueError("silent signal: SNR undefined")
    if rms_n == 0.0:
        raise ValueError("silent noise: SNR undefined")
    divisor = 40.0 if formula == PAPER else 20.0
    c = (rms_s / rms_n) * 10.0 ** (-float(target_snr_db) / divisor)
    mixed = signal.samples + c * fitted
    if np.max(np.abs(mixed)) > 1.0:
        warnings.warn("mixed amplitude exceeds [-1, 1]; output left unclipped")
    return Waveform(mixed, signal.sample_rate)


def measure_snr(signal: Waveform, scaled_noise: Waveform, formula: str = PAPER) -> float:
    """SNR of already-mixed components under the chosen formula, in dB."""
    divisor = 40.0 if formula == PAPER else 20.0
    return divisor * math.log10(rms(signal) / rms(scaled_noise))


@dataclass(frozen=True)
class Manipulation:
    """One attack: kind resample/speed/pitch takes a magnitude; add_noise
    additionally names a bank entry and reads magnitude as target SNR dB."""

    kind: str
    magnitude: float
    noise_id: str = ""

    def __post_init__(self):
        if self.kind not in ("resample", "speed", "pitch", "add_noise"):
            raise ValueError(f"unknown manipulation kind {self.kind!r}")
        if self.kind == "add_noise" and not self.noise_id:
            raise ValueError("add_noise needs a noise_id")

    def describe(self) -> str:
        return f"add_noise:{self.noise_id}" if self.kind == "add_noise" else self.kind

    def is_identity(self) -> bool:
        if self.kind == "resample":
            return self.magnitude == 0
        if self.kind == "speed":
            return self.magnitude == 1.0
        if self.kind == "pitch":
            return self.magnitude == 0
        return False


def apply_manipulation(w: Waveform, m: Manipulation, bank=None, formula: str = PAPER) -> Waveform:
    if m.kind == "resample":
        return resample(w, int(m.magnitude))
    if m.kind == "speed":
        return time_stretch(w, m.magnitude)
    if m.kind == "pitch":
        return pitch_shift(w, int(m.magnitude))
    if bank is None:
        raise ValueError("add_noise manipulation needs a noise bank")
    return mix_noise(w, bank.get(m.noise_id), m.magnitude, formula)


@dataclass(frozen=True)
class NoiseBank:
    entries: dict

    def get(self, noise_id: str) -> Waveform:
        try:
            return self.entries[noise_id]
        except KeyError:
            raise KeyError(f"noise bank has no entry {noise_id!r}") from None

    def ids(self) -> list:
        return sorted(self.entries)


def load_noise_bank(directory, working_rate: int = 16000) -> NoiseBank:
    """Read every WAV in a directory, resampling to the working rate."""
    directory = Path(directory)
    entries = {}
    for path in sorted(directory.glob("*.wav")):
        w = load_wav(path)
        if w.sample_rate != working_rate:
            samples = _resample_by_ratio(w.samples, working_rate / w.sample_rate)
            w = Waveform(samples, working_rate)
        entries[path.stem] = w
    if not entries:
        raise ValueError(f"no WAV files found in {directory}")
    return NoiseBank(entries)


def _lowpass(rng_noise: np.ndarray, sample_rate: int, cutoff_hz: float) -> np.ndarray:
    spec = np.fft.rfft(rng_noise)
    freqs = np.fft.rfftfreq(rng_noise.size, 1.0 / sample_rate)
    spec[freqs > cutoff_hz] = 0.0
    return np.fft.irfft(spec, rng_noise.size)


def _highpass(rng_noise: np.ndarray, sample_rate: int, cutoff_hz: float) -> np.ndarray:
    spec = np.fft.rfft(rng_noise)
    freqs = np.fft.rfftfreq(rng_noise.size, 1.0 / sample_rate)
    spec[freqs < cutoff_hz] = 0.0
    return np.fft.irfft(spec, rng_noise.size)


def _bursts(rng: np.random.Generator, n: int, sample_rate: int, rate_hz: float,
            burst_len: float, jitter: float = 0.3) -> np.ndarray:
    """Decaying broadband bursts at roughly rate_hz events per second."""
    out = np.zeros(n)
    period = sample_rate / rate_hz
    t = 0.0
    burst_n = max(8, int(burst_len * sample_rate))
    decay = np.exp(-np.arange(burst_n) / (0.2 * burst_n))
    while t < n:
        start = int(t)
        seg = min(burst_n, n - start)
        if seg > 0:
            out[start : start + seg] += rng.standard_normal(seg) * decay[:seg]
        t += period * (1.0 + jitter * (rng.random() - 0.5))
    return out


def _synth_noise(tag: str, rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    tt = np.arange(n) / sr
    white = rng.standard_normal(n)
    if tag == "breathing":
        envelope = 0.55 + 0.45 * np.sin(2.0 * np.pi * 0.3 * tt)
        return _lowpass(white, sr, 900.0) * envelope
    if tag == "footsteps":
        return _bursts(rng, n, sr, 1.8, 0.06)
    if tag == "laughing":
        buzz = np.sign(np.sin(2.0 * np.pi * 190.0 * tt))
        envelope = np.clip(np.sin(2.0 * np.pi * 4.5 * tt), 0.0, None)
        return buzz * envelope + 0.2 * _lowpass(white, sr, 2000.0)
    if tag == "mouse-click":
        return _bursts(rng, n, sr, 2.5, 0.004)
    if tag == "keyboard-type":
        return _bursts(rng, n, sr, 7.0, 0.01, jitter=0.8)
    if tag == "clock-tick":
        return _bursts(rng, n, sr, 1.0, 0.008, jitter=0.0)
    if tag == "engine":
        rumble = np.sin(2.0 * np.pi * 42.0 * tt) + 0.5 * np.sin(2.0 * np.pi * 84.0 * tt + 0.7)
        return rumble + 0.3 * _lowpass(white, sr, 400.0)
    if tag == "train":
        clatter = 0.5 + 0.5 * np.square(np.sin(2.0 * np.pi * 2.0 * tt))
        return _lowpass(white, sr, 1500.0) * clatter
    if tag == "fireworks":
        return _bursts(rng, n, sr, 0.7, 0.35, jitter=0.9)
    if tag == "rain":
        return _highpass(white, sr, 1200.0)
    if tag == "wind":
        wander = 0.6 + 0.4 * np.sin(2.0 * np.pi * 0.17 * tt + 1.1)
        return _lowpass(white, sr, 600.0) * wander
    if tag == "thunderstorm":
        rumble = _lowpass(_bursts(rng, n, sr, 0.5, 0.8, jitter=0.6), sr, 250.0)
        return rumble + 0.15 * _highpass(white, sr, 1500.0)
    raise ValueError(f"unknown noise class {tag!r}")


def generate_noise_bank(directory, sample_rate: int = 16000, seconds: float = 3.0,
                        seed: int = 7) -> NoiseBank:
    """Write 12 deterministic synthetic stand-in textures as <taxonomy>_<class>.wav."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = int(round(seconds * sample_rate))
    entries = {}
    for index, (taxonomy, tag) in enumerate(NOISE_CLASSES):
        rng = np.random.default_rng((seed, index))
        samples = _synth_noise(tag, rng, n, sample_rate)
        samples = 0.5 * samples / np.max(np.abs(samples))
        w = Waveform(samples, sample_rate)
        save_wav(w, directory / f"{taxonomy}_{tag}.wav", bit_depth=FLOAT32)
        entries[f"{taxonomy}_{tag}"] = w
    return NoiseBank(entries)
