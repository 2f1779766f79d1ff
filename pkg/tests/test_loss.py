import numpy as np
import pytest

from estoi_sep import gradcheck
from estoi_sep.dsp import MagnitudeSpectrogram, StftConfig
from estoi_sep.loss import (EstoiLossConfig, combined_loss, d_final, estoi_loss,
                            intermediate_d, make_loss, mse_loss, normalize_segment,
                            normalize_segment_backward, segment, segment_frames_for)
from estoi_sep.octave import default_band_config


@pytest.fixture
def config():
    return EstoiLossConfig.default()


def spectra(rng, B=2, T=120):
    return [rng.uniform(0.05, 1.0, (B, 65, T)) for _ in range(4)]


def test_default_segment_length(config):
    assert config.segment_frames == 96
    assert segment_frames_for(StftConfig(), 0.384) == 96


def test_segment_count():
    assert segment(np.zeros((14, 256)), 96).count == 161
    assert segment(np.zeros((3, 10)), 4).segments.shape == (7, 3, 4)
    stack = segment(np.arange(12.0).reshape(2, 6), 3)
    np.testing.assert_array_equal(stack.segments[1], [[1, 2, 3], [7, 8, 9]])


def test_segment_too_short():
    with pytest.raises(ValueError, match="longer sequence"):
        segment(np.zeros((3, 5)), 6)


def test_normalize_postconditions(rng):
    out = normalize_segment(rng.uniform(0, 1, (5, 8)))
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(out, axis=0), 1, rtol=1e-12)


def test_normalize_constant_row_is_finite():
    seg = np.ones((3, 4))
    seg[1] = [0.1, 0.5, 0.3, 0.9]
    out = normalize_segment(seg)
    assert np.all(np.isfinite(out))


def test_normalize_backward_matches_difference(rng):
    seg = rng.uniform(0, 1, (4, 5))
    w = rng.standard_normal((4, 5))
    g = normalize_segment_backward(seg, w)
    h = 1e-6
    for idx in [(0, 0), (2, 3), (3, 4)]:
        e = np.zeros_like(seg)
        e[idx] = h
        fd = ((normalize_segment(seg + e) * w).sum()
              - (normalize_segment(seg - e) * w).sum()) / (2 * h)
        assert abs(fd - g[idx]) < 1e-7


def test_intermediate_d_identities(rng):
    seg = rng.uniform(0, 1, (4, 6))
    x = normalize_segment(seg)
    assert intermediate_d(x, x) == pytest.approx(1.0, abs=1e-12)
    assert intermediate_d(x, normalize_segment(-seg)) == pytest.approx(-1.0, abs=1e-12)
    # columns of the normalised matrix are unit vectors, so |d| <= 1
    y = normalize_segment(rng.uniform(0, 1, (4, 6)))
    assert abs(intermediate_d(x, y)) <= 1.0


def test_estoi_self_is_minus_one(rng, config):
    x = rng.uniform(0.05, 1.0, (65, 100))
    out = estoi_loss(x, x, x, x, config)
    assert out.value == pytest.approx(-1.0, abs=1e-12)
    assert np.max(np.abs(out.grad_source1)) < 1e-10


def test_estoi_invariances(rng, config):
    e1, e2, t1, t2 = spectra(rng)
    base = estoi_loss(e1, e2, t1, t2, config).value
    assert estoi_loss(7.0 * e1, 0.2 * e2, t1, t2, config).value == pytest.approx(base, abs=1e-12)
    assert estoi_loss(e2, e1, t2, t1, config).value == pytest.approx(base, abs=1e-12)
    # permuting bins inside one band leaves band energies and the loss unchanged
    lo, hi = config.band_config.band_edges[-1]
    perm = e1.copy()
    perm[:, lo:hi + 1] = perm[:, lo:hi + 1][:, ::-1]
    assert estoi_loss(perm, e2, t1, t2, config).value == pytest.approx(base, abs=1e-12)


def test_d_final_symmetric(rng, config):
    e, t = rng.uniform(0, 1, (2, 3, 65, 100))
    np.testing.assert_allclose(d_final(e, t, config)[0], d_final(t, e, config)[0], atol=1e-13)


def test_batch_mean(rng, config):
    e1, e2, t1, t2 = spectra(rng, B=3)
    total = estoi_loss(e1, e2, t1, t2, config).value
    parts = [estoi_loss(e1[b], e2[b], t1[b], t2[b], config).value for b in range(3)]
    assert total == pytest.approx(np.mean(parts), abs=1e-13)


def test_mse_examples(rng):
    t1, t2 = rng.uniform(0, 1, (2, 65, 10))
    out = mse_loss(t1, t2, t1, t2)
    assert out.value == 0.0 and not np.any(out.grad_source1)
    out = mse_loss(t1 + 1.0, t2, t1, t2)
    assert out.value == pytest.approx(0.5)
    np.testing.assert_allclose(out.grad_source1, 1.0 / t1.size)


def test_combined(rng, config):
    e1, e2, t1, t2 = spectra(rng)
    mse = mse_loss(e1, e2, t1, t2)
    zero = combined_loss(e1, e2, t1, t2, 0.0, config)
    assert zero.value == mse.value
    np.testing.assert_array_equal(zero.grad_source1, mse.grad_source1)
    est = estoi_loss(e1, e2, t1, t2, config)
    both = combined_loss(e1, e2, t1, t2, 0.5, config)
    assert both.value == pytest.approx(mse.value + 0.5 * est.value)
    with pytest.raises(ValueError):
        combined_loss(e1, e2, t1, t2, -1.0, config)
    assert make_loss("mse", config) is mse_loss


def test_spectrogram_objects_accepted(rng, config):
    arrays = [rng.uniform(0, 1, (65, 100)) for _ in range(4)]
    objs = [MagnitudeSpectrogram(a, StftConfig()) for a in arrays]
    assert estoi_loss(*objs, config).value == estoi_loss(*arrays, config).value


def test_shape_errors(rng, config):
    a = rng.uniform(0, 1, (65, 100))
    with pytest.raises(ValueError):
        estoi_loss(a, a, a, a[:, :99], config)
    with pytest.raises(ValueError, match="longer sequence"):
        estoi_loss(a[:, :50], a[:, :50], a[:, :50], a[:, :50], config)
    with pytest.raises(ValueError):
        EstoiLossConfig(default_band_config(), 1)


def test_estoi_gradient_quick():
    results = gradcheck.run("estoi", instances=3, seed=11)
    assert all(r.passed for r in results), results
