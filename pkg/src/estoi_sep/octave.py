"""One-third octave band decomposition of magnitude spectrograms."""

from dataclasses import dataclass, asdict

import numpy as np


class EmptyBandError(ValueError):
    """A one-third octave band received no STFT bins."""


@dataclass(frozen=True)
class OctaveBandConfig:
    """Band layout on an STFT grid.

    ``band_edges`` holds inclusive ``(f1_bin, f2_bin)`` pairs and
    ``centers`` the nominal centre frequency of each retained band.
    ``nominal_bands`` counts bands before any empty ones were dropped.
    """

    sample_rate: int
    fft_size: int
    lowest_center: float
    max_freq: float
    centers: tuple
    band_edges: tuple
    nominal_bands: int

    @property
    def num_bands(self):
        return len(self.band_edges)

    @property
    def n_freq(self):
        return self.fft_size // 2 + 1

    def matrix(self):
        """J x F 0/1 membership matrix."""
        m = np.zeros((self.num_bands, self.n_freq))
        for j, (lo, hi) in enumerate(self.band_edges):
            m[j, lo:hi + 1] = 1.0
        return m

    def to_dict(self):
        d = asdict(self)
        d["centers"] = list(self.centers)
        d["band_edges"] = [list(e) for e in self.band_edges]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            sample_rate=int(d["sample_rate"]), fft_size=int(d["fft_size"]),
            lowest_center=float(d["lowest_center"]), max_freq=float(d["max_freq"]),
            centers=tuple(float(c) for c in d["centers"]),
            band_edges=tuple((int(a), int(b)) for a, b in d["band_edges"]),
            nominal_bands=int(d["nominal_bands"]))


def band_centers(lowest_center, max_freq):
    """Centres c_j = lowest_center * 2**(j/3) whose upper edge stays <= max_freq."""
    centers = []
    j = 0
    while lowest_center * 2.0 ** (j / 3.0 + 1.0 / 6.0) <= max_freq:
        centers.append(lowest_center * 2.0 ** (j / 3.0))
        j += 1
    return centers


def make_band_config(sample_rate=16000, fft_size=128, lowest_center=150.0,
                     max_freq=8000.0, drop_empty=False):
    """Assign STFT bins to one-third octave bands.

    Bin b (centre b * sample_rate / fft_size) belongs to band j when it
    lies in [c_j * 2**(-1/6), c_j * 2**(1/6)). A band that receives no bin
    raises :class:`EmptyBandError` unless ``drop_empty`` is set, in which
    case it is removed from the layout.
    """
    if not 0 < lowest_center < max_freq <= sample_rate / 2:
        raise ValueError(
            "need 0 < lowest_center < max_freq <= sample_rate/2, got "
            f"{lowest_center}, {max_freq}, {sample_rate}")
    centers = band_centers(lowest_center, max_freq)
    if not centers:
        raise ValueError("no complete band fits below max_freq")
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size

    kept_centers, edges = [], []
    for j, c in enumerate(centers):
        lo, hi = c * 2.0 ** (-1.0 / 6.0), c * 2.0 ** (1.0 / 6.0)
        bins = np.flatnonzero((freqs >= lo) & (freqs < hi))
        if bins.size == 0:
            if drop_empty:
                continue
            raise EmptyBandError(
                f"band {j} (centre {c:.1f} Hz, {lo:.1f}-{hi:.1f} Hz) contains no STFT bin "
                f"at {sample_rate / fft_size:.1f} Hz resolution")
        kept_centers.append(c)
        edges.append((int(bins[0]), int(bins[-1])))
    if not edges:
        raise EmptyBandError("every band is empty at this FFT resolution")
    return OctaveBandConfig(sample_rate, fft_size, float(lowest_center), float(max_freq),
                            tuple(kept_centers), tuple(edges), len(centers))


def default_band_config(sample_rate=16000, fft_size=128):
    """Pipeline default: 150 Hz lowest centre, up to 8 kHz, empty bands dropped."""
    return make_band_config(sample_rate, fft_size, 150.0, min(8000.0, sample_rate / 2),
                            drop_empty=True)


@dataclass
class OctaveBandMatrix:
    values: np.ndarray
    config: OctaveBandConfig


def band_energies(mags, config):
    """Band magnitudes for an array ``(..., F, T)``; returns ``(..., J, T)``."""
    mags = np.asarray(mags, dtype=np.float64)
    if mags.shape[-2] != config.n_freq:
        raise ValueError(f"expected {config.n_freq} bins, got {mags.shape[-2]}")
    return np.sqrt(np.einsum("jf,...ft->...jt", config.matrix(), mags * mags))


def band_energies_backward(mags, bands, grad_bands, config):
    """Pull a gradient w.r.t. band values back onto the spectrogram.

    d bands[j, t] / d mags[f, t] = mags[f, t] / bands[j, t]; a silent band
    (value 0) passes no gradient.
    """
    safe = np.where(bands > 0.0, bands, 1.0)
    scaled = np.where(bands > 0.0, grad_bands / safe, 0.0)
    return mags * np.einsum("jf,...jt->...ft", config.matrix(), scaled)


def band_decompose(spec, config):
    """Apply the filterbank to a :class:`MagnitudeSpectrogram`."""
    scfg = spec.config
    if scfg.fft_size != config.fft_size or scfg.sample_rate != config.sample_rate:
        raise ValueError("spectrogram and band config disagree on fft_size/sample_rate")
    return OctaveBandMatrix(band_energies(spec.mags, config), config)
