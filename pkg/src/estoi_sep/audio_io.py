"""PCM WAV input/output and band-limited resampling."""

from dataclasses import dataclass
from fractions import Fraction
import os

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly


class AudioError(ValueError):
    """Raised for unreadable, unsupported or degenerate audio."""


@dataclass
class AudioClip:
    """Mono time-domain signal with its sampling rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError("AudioClip samples must be one-dimensional")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise AudioError(f"invalid sample rate {self.sample_rate!r}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("AudioClip contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate


def read_wav(path):
    """Read a 16-bit PCM or 32-bit float WAV file as a mono clip.

    Multichannel files are averaged to mono. Integer samples are scaled
    by 2**15 so that full scale maps to [-1, 1).
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioError(f"{path}: {exc}") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample encoding {data.dtype}")

    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.shape[0] == 0:
        raise AudioError(f"{path}: zero-length audio")
    return AudioClip(samples, rate)


def write_wav(clip, path, subtype="PCM_16"):
    """Write ``clip`` to ``path``; samples outside [-1, 1] are clamped.

    ``subtype`` is ``"PCM_16"`` (default) or ``"FLOAT"``.
    """
    if len(clip) == 0:
        raise AudioError("cannot write an empty clip")
    samples = np.clip(clip.samples, -1.0, 1.0)
    if subtype == "PCM_16":
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    elif subtype == "FLOAT":
        data = samples.astype(np.float32)
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    try:
        wavfile.write(path, clip.sample_rate, data)
    except OSError as exc:
        raise OSError(f"cannot write WAV file {path}: {exc}") from exc


def resample(clip, target_rate):
    """Resample with a polyphase Kaiser-windowed sinc filter."""
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise AudioError(f"invalid target rate {target_rate!r}")
    target_rate = int(target_rate)
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), target_rate)
    ratio = Fraction(target_rate, clip.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    # default resample_poly design: 20*max(up, down)+1 taps, Kaiser beta 5
    out = resample_poly(clip.samples, up, down, window=("kaiser", 5.0))
    return AudioClip(out, target_rate)


def resample_kernel_taps(source_rate, target_rate):
    """Length of the interpolation filter used by :func:`resample`."""
    ratio = Fraction(int(target_rate), int(source_rate))
    return 20 * max(ratio.numerator, ratio.denominator) + 1
