"""STFT analysis and weighted overlap-add synthesis."""

from dataclasses import dataclass, field, asdict

import numpy as np

from .audio_io import AudioClip


@dataclass(frozen=True)
class StftConfig:
    """Frame layout of the analysis/synthesis chain.

    ``window`` is ``"sqrt_hann"`` (default, used for both analysis and
    synthesis) or ``"hann"``. ``fft_size`` defaults to ``window_length``;
    a larger value zero-pads each frame.
    """

    window_length: int = 128
    hop: int = 64
    fft_size: int = None
    window: str = "sqrt_hann"
    sample_rate: int = 16000

    def __post_init__(self):
        if self.fft_size is None:
            object.__setattr__(self, "fft_size", self.window_length)
        if self.window_length < 8 or self.window_length % 2:
            raise ValueError("window_length must be even and >= 8")
        if not 0 < self.hop <= self.window_length:
            raise ValueError("hop must lie in (0, window_length]")
        if self.fft_size < self.window_length:
            raise ValueError("fft_size must be >= window_length")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.window not in ("sqrt_hann", "hann"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def n_freq(self):
        return self.fft_size // 2 + 1

    @property
    def latency_samples(self):
        # a sample is only final once the frame that contains it has been synthesized
        return self.window_length

    @property
    def latency_ms(self):
        return 1000.0 * self.latency_samples / self.sample_rate

    def analysis_window(self):
        n = np.arange(self.window_length)
        hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.window_length)
        return np.sqrt(hann) if self.window == "sqrt_hann" else hann

    def synthesis_window(self):
        return self.analysis_window()

    def to_dict(self):
        return asdict(self)


@dataclass
class ComplexSpectrogram:
    bins: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.complex128)
        if self.bins.ndim != 2 or self.bins.shape[0] != self.config.n_freq:
            raise ValueError(
                f"expected {self.config.n_freq} frequency bins, got shape {self.bins.shape}")

    @property
    def n_frames(self):
        return self.bins.shape[1]


@dataclass
class MagnitudeSpectrogram:
    mags: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.mags = np.asarray(self.mags, dtype=np.float64)
        if self.mags.ndim != 2 or self.mags.shape[0] != self.config.n_freq:
            raise ValueError(
                f"expected {self.config.n_freq} frequency bins, got shape {self.mags.shape}")

    @property
    def n_frames(self):
        return self.mags.shape[1]


def n_frames_for(n_samples, config):
    if n_samples < config.window_length:
        return 0
    return (n_samples - config.window_length) // config.hop + 1


def stft(clip, config=StftConfig()):
    """Frame ``clip`` without centre padding; frame t starts at t * hop."""
    if clip.sample_rate != config.sample_rate:
        raise ValueError(
            f"clip sample rate {clip.sample_rate} != STFT rate {config.sample_rate}")
    n_frames = n_frames_for(len(clip), config)
    if n_frames == 0:
        raise ValueError(
            f"clip of {len(clip)} samples is shorter than one window ({config.window_length})")
    frames = np.lib.stride_tricks.sliding_window_view(
        clip.samples, config.window_length)[::config.hop][:n_frames]
    bins = np.fft.rfft(frames * config.analysis_window(), n=config.fft_size, axis=1)
    return ComplexSpectrogram(bins.T, config)


def istft(spec, length=None):
    """Weighted overlap-add inverse of :func:`stft`.

    Overlap-added output is divided by the summed squared windows wherever
    that sum is non-negligible, so reconstruction is exact away from the
    first sample and any tail not covered by a full frame.
    """
    config = spec.config
    n_frames = spec.n_frames
    win = config.synthesis_window()
    frames = np.fft.irfft(spec.bins.T, n=config.fft_size, axis=1)[:, :config.window_length]
    n_out = (n_frames - 1) * config.hop + config.window_length if n_frames else 0
    out = np.zeros(n_out)
    norm = np.zeros(n_out)
    wsq = win * config.analysis_window()
    for t in range(n_frames):
        start = t * config.hop
        out[start:start + config.window_length] += frames[t] * win
        norm[start:start + config.window_length] += wsq
    good = norm > 1e-8
    out[good] /= norm[good]
    out[~good] = 0.0
    if length is not None:
        if length > n_out:
            out = np.concatenate([out, np.zeros(length - n_out)])
        out = out[:length]
    return AudioClip(out, config.sample_rate)


def magnitude(spec):
    return MagnitudeSpectrogram(np.abs(spec.bins), spec.config)
