import numpy as np
import pytest

from estoi_sep.dsp import MagnitudeSpectrogram, StftConfig
from estoi_sep.octave import (EmptyBandError, OctaveBandConfig, band_centers, band_decompose,
                              band_energies, band_energies_backward, default_band_config,
                              make_band_config)

# Frozen layout of the default 16 kHz / 128-point configuration: (first, last) bin
# of each non-empty band, derived by listing bin centres against band edges.
DEFAULT_EDGES = ((2, 2), (3, 3), (4, 4), (5, 5), (6, 6), (7, 8), (9, 10), (11, 13),
                 (14, 17), (18, 21), (22, 27), (28, 34), (35, 43), (44, 54))


def test_nominal_band_count():
    assert len(band_centers(150.0, 8000.0)) == 17
    assert default_band_config().nominal_bands == 17


def test_default_layout_frozen():
    cfg = default_band_config()
    assert cfg.num_bands == 14
    assert cfg.band_edges == DEFAULT_EDGES
    np.testing.assert_allclose(cfg.centers[0], 150 * 2 ** (2 / 3))


def test_strict_mode_names_empty_band():
    with pytest.raises(EmptyBandError, match="band 0"):
        make_band_config(16000, 128, 150.0, 8000.0)


def test_fine_resolution_has_no_empty_band():
    cfg = make_band_config(16000, 512, 150.0, 8000.0)
    assert cfg.num_bands == cfg.nominal_bands == 17


def test_bins_assigned_once_and_in_edges():
    for fft in (128, 256, 512, 1024):
        cfg = make_band_config(16000, fft, 150.0, 8000.0, drop_empty=True)
        m = cfg.matrix()
        assert np.all(m.sum(axis=0) <= 1)
        freqs = np.arange(cfg.n_freq) * 16000 / fft
        for c, (lo, hi) in zip(cfg.centers, cfg.band_edges):
            assert c * 2 ** (-1 / 6) <= freqs[lo] and freqs[hi] < c * 2 ** (1 / 6)


def brute_force_bands(mags, cfg):
    out = np.zeros((cfg.num_bands, mags.shape[1]))
    for j, (lo, hi) in enumerate(cfg.band_edges):
        for t in range(mags.shape[1]):
            out[j, t] = np.sqrt(sum(mags[f, t] ** 2 for f in range(lo, hi + 1)))
    return out


def test_band_energies_against_loops(rng):
    cfg = default_band_config()
    mags = rng.uniform(0, 1, (65, 7))
    np.testing.assert_allclose(band_energies(mags, cfg), brute_force_bands(mags, cfg),
                               rtol=1e-13)


def test_batched_energies(rng):
    cfg = default_band_config()
    mags = rng.uniform(0, 1, (3, 65, 5))
    out = band_energies(mags, cfg)
    for b in range(3):
        np.testing.assert_allclose(out[b], band_energies(mags[b], cfg))


def test_scaling(rng):
    cfg = default_band_config()
    mags = rng.uniform(0, 1, (65, 4))
    np.testing.assert_allclose(band_energies(3.5 * mags, cfg), 3.5 * band_energies(mags, cfg))


def test_backward_silent_band_passes_zero(rng):
    cfg = default_band_config()
    mags = rng.uniform(0, 1, (65, 3))
    mags[2, :] = 0.0  # band 0 holds only bin 2
    bands = band_energies(mags, cfg)
    g = band_energies_backward(mags, bands, np.ones_like(bands), cfg)
    assert np.all(np.isfinite(g))
    assert not np.any(g[2])


def test_decompose_checks_config(rng):
    spec = MagnitudeSpectrogram(rng.uniform(0, 1, (65, 4)), StftConfig())
    assert band_decompose(spec, default_band_config()).values.shape == (14, 4)
    with pytest.raises(ValueError):
        band_decompose(spec, default_band_config(16000, 256))


def test_dict_round_trip():
    cfg = default_band_config()
    assert OctaveBandConfig.from_dict(cfg.to_dict()) == cfg


def test_invalid_ranges():
    with pytest.raises(ValueError):
        make_band_config(16000, 128, 150.0, 9000.0)
    with pytest.raises(ValueError):
        band_energies(np.zeros((33, 2)), default_band_config())
