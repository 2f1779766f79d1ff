"""Differentiable ESTOI sequence loss, MSE loss and their combination.

All losses take the two estimated and two target magnitude spectrograms,
either as :class:`~estoi_sep.dsp.MagnitudeSpectrogram` objects or as
arrays of shape ``(F, T)`` or ``(B, F, T)``, and return a
:class:`LossOutput` carrying the scalar value and its exact gradients
with respect to both estimates.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .dsp import MagnitudeSpectrogram, StftConfig
from .octave import OctaveBandMatrix, band_energies, band_energies_backward, default_band_config

SEGMENT_SECONDS = 0.384


@dataclass(frozen=True)
class EstoiLossConfig:
    band_config: object
    segment_frames: int
    epsilon: float = 1e-9

    def __post_init__(self):
        if self.segment_frames < 2:
            raise ValueError("segment_frames must be >= 2")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def default(cls, stft_config=StftConfig(), segment_seconds=SEGMENT_SECONDS,
                epsilon=1e-9, band_config=None):
        """384 ms segments rounded to whole hops; bands from :func:`default_band_config`."""
        if band_config is None:
            band_config = default_band_config(stft_config.sample_rate, stft_config.fft_size)
        return cls(band_config, segment_frames_for(stft_config, segment_seconds), epsilon)


def segment_frames_for(stft_config, seconds=SEGMENT_SECONDS):
    return int(round(seconds * stft_config.sample_rate / stft_config.hop))


@dataclass
class SegmentStack:
    segments: np.ndarray  # (M, J, N)

    @property
    def count(self):
        return self.segments.shape[0]


@dataclass
class LossOutput:
    value: float
    grad_source1: np.ndarray
    grad_source2: np.ndarray


def segment(bands, N):
    """Sliding N-frame windows over a J x T band matrix; M = T - N + 1."""
    values = bands.values if isinstance(bands, OctaveBandMatrix) else np.asarray(bands, float)
    T = values.shape[-1]
    if T < N:
        raise ValueError(
            f"sequence of {T} frames is shorter than the {N}-frame segment; "
            "use a longer sequence")
    windows = np.lib.stride_tricks.sliding_window_view(values, N, axis=-1)
    return SegmentStack(np.ascontiguousarray(np.moveaxis(windows, -2, 0)))


def normalize_segment(seg, epsilon=1e-9):
    """Zero-mean/unit-norm rows, then zero-mean/unit-norm columns of the result."""
    out, _ = kernels.normalize_forward(np.asarray(seg, dtype=np.float64), epsilon)
    return out


def normalize_segment_backward(seg, grad, epsilon=1e-9):
    """Vector-Jacobian product of :func:`normalize_segment`."""
    _, cache = kernels.normalize_forward(np.asarray(seg, dtype=np.float64), epsilon)
    return kernels.normalize_backward(cache, np.asarray(grad, dtype=np.float64))


def intermediate_d(seg_x, seg_y):
    """Column-wise inner products of two normalised segments, averaged over N."""
    seg_x = np.asarray(seg_x)
    return float((seg_x * seg_y).sum() / seg_x.shape[-1])


def _as_batch(arr):
    if isinstance(arr, MagnitudeSpectrogram):
        arr = arr.mags
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim != 3:
        raise ValueError(f"expected (F, T) or (B, F, T) spectrogram, got shape {arr.shape}")
    return arr, False


def _prepare(est1, est2, tgt1, tgt2):
    arrays = [_as_batch(a) for a in (est1, est2, tgt1, tgt2)]
    shapes = {a.shape for a, _ in arrays}
    if len(shapes) != 1:
        raise ValueError(f"spectrogram shapes differ: {sorted(shapes)}")
    squeeze = arrays[0][1]
    return [a for a, _ in arrays], squeeze


def d_final(est, tgt, config, want_grad=False):
    """Per-item ESTOI correlation of ``est`` against ``tgt`` (``(B, F, T)``).

    Returns ``(d, grad)``; ``grad`` is d d / d est, or None.
    """
    xb = band_energies(est, config.band_config)
    yb = band_energies(tgt, config.band_config)
    if xb.shape[-1] < config.segment_frames:
        raise ValueError(
            f"sequence of {xb.shape[-1]} frames is shorter than the "
            f"{config.segment_frames}-frame segment; use a longer sequence")
    d, gbands = kernels.estoi_correlation(xb, yb, config.segment_frames,
                                          config.epsilon, want_grad)
    if not want_grad:
        return d, None
    return d, band_energies_backward(est, xb, gbands, config.band_config)


def estoi_loss(est1, est2, tgt1, tgt2, config):
    """-(d_final(est1, tgt1) + d_final(est2, tgt2)) / 2, averaged over the batch."""
    (e1, e2, t1, t2), squeeze = _prepare(est1, est2, tgt1, tgt2)
    B = e1.shape[0]
    d1, g1 = d_final(e1, t1, config, want_grad=True)
    d2, g2 = d_final(e2, t2, config, want_grad=True)
    value = -float((d1 + d2).sum()) / (2 * B)
    scale = -1.0 / (2 * B)
    g1, g2 = g1 * scale, g2 * scale
    if squeeze:
        g1, g2 = g1[0], g2[0]
    return LossOutput(value, g1, g2)


def mse_loss(est1, est2, tgt1, tgt2):
    """Mean over both sources of the mean squared spectral error."""
    (e1, e2, t1, t2), squeeze = _prepare(est1, est2, tgt1, tgt2)
    r1, r2 = e1 - t1, e2 - t2
    count = r1.size
    value = float(((r1 * r1).sum() + (r2 * r2).sum()) / (2 * count))
    g1, g2 = r1 / count, r2 / count
    if squeeze:
        g1, g2 = g1[0], g2[0]
    return LossOutput(value, g1, g2)


def combined_loss(est1, est2, tgt1, tgt2, alpha, config):
    """mse + alpha * estoi."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    mse = mse_loss(est1, est2, tgt1, tgt2)
    if alpha == 0:
        return mse
    est = estoi_loss(est1, est2, tgt1, tgt2, config)
    return LossOutput(mse.value + alpha * est.value,
                      mse.grad_source1 + alpha * est.grad_source1,
                      mse.grad_source2 + alpha * est.grad_source2)


def make_loss(regime, config, alpha=0.0):
    """Return ``fn(est1, est2, tgt1, tgt2) -> LossOutput`` for a regime name."""
    if regime == "mse":
        return mse_loss
    if regime == "estoi":
        return lambda e1, e2, t1, t2: estoi_loss(e1, e2, t1, t2, config)
    if regime == "combined":
        return lambda e1, e2, t1, t2: combined_loss(e1, e2, t1, t2, alpha, config)
    raise ValueError(f"unknown loss regime {regime!r}")
