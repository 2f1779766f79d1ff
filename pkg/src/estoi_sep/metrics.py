"""Objective evaluation: ESTOI, STOI and BSS-EVAL SDR/SIR/SAR."""

import csv
from dataclasses import dataclass, asdict
import json
import math

import numpy as np
from scipy import linalg
from scipy.signal import fftconvolve

from . import kernels
from .audio_io import AudioClip, resample
from .dsp import StftConfig, stft
from .loss import EstoiLossConfig, segment_frames_for
from .octave import band_energies, make_band_config

SENTINEL_DB = 100.0
STOI_BETA_DB = -15.0
SILENCE_RANGE_DB = 40.0

REPORT_FIELDS = ("mixture_id", "source", "estoi", "stoi", "sdr_db", "sir_db", "sar_db")


@dataclass(frozen=True)
class IntelligibilityConfig:
    """STFT, band and segment settings shared by ESTOI and STOI."""

    stft: StftConfig
    loss: EstoiLossConfig
    remove_silence: bool = False

    @classmethod
    def native(cls, stft_config=StftConfig(), remove_silence=False):
        """The loss configuration: same STFT, bands up to 8 kHz, 384 ms segments."""
        return cls(stft_config, EstoiLossConfig.default(stft_config), remove_silence)

    @classmethod
    def standard(cls, remove_silence=True):
        """Conventional setting: 10 kHz, 256-sample Hann frames, 15 bands from 150 Hz."""
        scfg = StftConfig(window_length=256, hop=128, fft_size=512, window="hann",
                          sample_rate=10000)
        bands = make_band_config(10000, 512, 150.0, 5000.0)
        return cls(scfg, EstoiLossConfig(bands, segment_frames_for(scfg)), remove_silence)


def _samples(x):
    return x.samples if isinstance(x, AudioClip) else np.asarray(x, dtype=np.float64)


def remove_silent_frames(x, y, frame_len, hop, dyn_range=SILENCE_RANGE_DB):
    """Drop frames where the reference is more than ``dyn_range`` dB below
    its loudest frame, and overlap-add the survivors back together."""
    win = np.hanning(frame_len + 2)[1:-1]
    starts = np.arange(0, len(x) - frame_len + 1, hop)
    xf = np.stack([x[s:s + frame_len] * win for s in starts])
    yf = np.stack([y[s:s + frame_len] * win for s in starts])
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    n = (len(xf) - 1) * hop + frame_len if len(xf) else 0
    xo, yo = np.zeros(n), np.zeros(n)
    for k in range(len(xf)):
        xo[k * hop:k * hop + frame_len] += xf[k]
        yo[k * hop:k * hop + frame_len] += yf[k]
    return xo, yo


def _band_matrices(reference, estimate, config):
    x, y = _samples(reference), _samples(estimate)
    rate = reference.sample_rate if isinstance(reference, AudioClip) else config.stft.sample_rate
    if isinstance(estimate, AudioClip) and estimate.sample_rate != rate:
        raise ValueError("reference and estimate sample rates differ")
    n = min(len(x), len(y))
    x, y = x[:n], y[:n]
    if rate != config.stft.sample_rate:
        x = resample(AudioClip(x, rate), config.stft.sample_rate).samples
        y = resample(AudioClip(y, rate), config.stft.sample_rate).samples
    if config.remove_silence:
        x, y = remove_silent_frames(x, y, config.stft.window_length, config.stft.hop)
    sr = config.stft.sample_rate
    N = config.loss.segment_frames
    needed = (N - 1) * config.stft.hop + config.stft.window_length
    if len(x) < needed:
        raise ValueError(
            f"signal of {len(x)} samples at {sr} Hz is too short: need {needed} "
            f"for one {N}-frame segment")
    bc = config.loss.band_config
    xb = band_energies(np.abs(stft(AudioClip(x, sr), config.stft).bins), bc)
    yb = band_energies(np.abs(stft(AudioClip(y, sr), config.stft).bins), bc)
    return xb, yb


def estoi_metric(reference, estimate, config=None):
    """Mean spectro-temporally normalised segment correlation of two signals."""
    config = config or IntelligibilityConfig.native()
    xb, yb = _band_matrices(reference, estimate, config)
    d, _ = kernels.estoi_correlation(yb[None], xb[None], config.loss.segment_frames,
                                     config.loss.epsilon, want_grad=False)
    return float(d[0])


def stoi_metric(reference, estimate, config=None, beta_db=STOI_BETA_DB):
    """Per-band temporal correlation after level matching and clipping."""
    config = config or IntelligibilityConfig.native()
    xb, yb = _band_matrices(reference, estimate, config)
    N, eps = config.loss.segment_frames, config.loss.epsilon
    xs = np.lib.stride_tricks.sliding_window_view(xb, N, axis=1)  # (J, M, N)
    ys = np.lib.stride_tricks.sliding_window_view(yb, N, axis=1)
    gain = np.linalg.norm(xs, axis=2, keepdims=True) / np.maximum(
        np.linalg.norm(ys, axis=2, keepdims=True), eps)
    y_clip = np.minimum(ys * gain, xs * (1.0 + 10.0 ** (-beta_db / 20.0)))
    xc = xs - xs.mean(axis=2, keepdims=True)
    yc = y_clip - y_clip.mean(axis=2, keepdims=True)
    # same norm guard as the ESTOI normalisation: divide by max(norm, eps)
    xn = xc / np.maximum(np.linalg.norm(xc, axis=2, keepdims=True), eps)
    yn = yc / np.maximum(np.linalg.norm(yc, axis=2, keepdims=True), eps)
    return float((xn * yn).sum(axis=2).mean())


# ---------------------------------------------------------------------------
# BSS-EVAL with time-invariant distortion filters.

def _xcorr(a, b, max_lag, nfft):
    """c[d] = sum_u a[u] b[u + d] for d in [-max_lag, max_lag]."""
    cc = np.fft.irfft(np.conj(np.fft.rfft(a, nfft)) * np.fft.rfft(b, nfft), nfft)
    return np.concatenate([cc[nfft - max_lag:], cc[:max_lag + 1]])


def _solve(G, D):
    try:
        return linalg.solve(G, D, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        return linalg.lstsq(G, D)[0]


@dataclass
class BssDecomposition:
    target: np.ndarray
    interference: np.ndarray
    artifacts: np.ndarray


def bss_decompose(references, estimate, index, filter_len=512):
    """Split ``estimate`` into target, interference and artifact parts.

    The target is the least-squares projection of the (zero-padded)
    estimate onto ``filter_len`` delayed copies of ``references[index]``;
    target plus interference is the projection onto delayed copies of all
    references.
    """
    refs = np.asarray(references, dtype=np.float64)
    n_src, n = refs.shape
    L = filter_len
    est = np.concatenate([np.asarray(estimate, dtype=np.float64)[:n], np.zeros(L - 1)])
    nfft = int(2 ** np.ceil(np.log2(n + L)))

    lags = np.arange(L)
    toeplitz_idx = (lags[:, None] - lags[None, :]) + (L - 1)
    G = np.zeros((n_src * L, n_src * L))
    for i in range(n_src):
        for j in range(i, n_src):
            c = _xcorr(refs[i], refs[j], L - 1, nfft)
            block = c[toeplitz_idx]
            G[i * L:(i + 1) * L, j * L:(j + 1) * L] = block
            G[j * L:(j + 1) * L, i * L:(i + 1) * L] = block.T
    D = np.concatenate([_xcorr(refs[i], est, L - 1, nfft)[L - 1:] for i in range(n_src)])

    sl = slice(index * L, (index + 1) * L)
    c_target = _solve(G[sl, sl], D[sl])
    target = fftconvolve(refs[index], c_target)
    c_all = _solve(G, D)
    projection = sum(fftconvolve(refs[i], c_all[i * L:(i + 1) * L]) for i in range(n_src))
    return BssDecomposition(target, projection - target, est - projection)


def _ratio_db(num, den):
    if den <= num * 10.0 ** (-SENTINEL_DB / 10.0):
        return SENTINEL_DB
    return 10.0 * math.log10(num / den)


def bss_eval(references, estimates, filter_len=512):
    """Per-source ``(sdr_db, sir_db, sar_db)``; estimates are not re-ordered.

    Ratios at or above ``SENTINEL_DB`` (exact reconstruction up to an
    allowed filter) are reported as ``SENTINEL_DB``.
    """
    refs = [_samples(r) for r in references]
    ests = [_samples(e) for e in estimates]
    n = min(min(len(r) for r in refs), min(len(e) for e in ests))
    refs = np.stack([r[:n] for r in refs])
    for k, r in enumerate(refs):
        if not np.any(r):
            raise ValueError(f"reference {k} is all zeros")
    results = []
    for j, est in enumerate(ests):
        dec = bss_decompose(refs, est[:n], j, filter_len)
        s = float(np.sum(dec.target ** 2))
        e_i = float(np.sum(dec.interference ** 2))
        e_a = float(np.sum(dec.artifacts ** 2))
        e_ia = float(np.sum((dec.interference + dec.artifacts) ** 2))
        s_i = float(np.sum((dec.target + dec.interference) ** 2))
        results.append((_ratio_db(s, e_ia), _ratio_db(s, e_i), _ratio_db(s_i, e_a)))
    return results


# ---------------------------------------------------------------------------
# Reports

@dataclass
class MetricReport:
    mixture_id: str
    source: int
    estoi: float
    stoi: float
    sdr_db: float
    sir_db: float
    sar_db: float


def evaluate_pair(mixture_id, references, estimates, config=None, filter_len=512):
    """All five metrics for both sources of one mixture."""
    config = config or IntelligibilityConfig.native()
    bss = bss_eval(references, estimates, filter_len)
    reports = []
    for k, (ref, est) in enumerate(zip(references, estimates)):
        sdr, sir, sar = bss[k]
        reports.append(MetricReport(mixture_id, k + 1, estoi_metric(ref, est, config),
                                    stoi_metric(ref, est, config), sdr, sir, sar))
    return reports


def aggregate(reports):
    """Mean and median of every numeric column."""
    out = {}
    for name in REPORT_FIELDS[2:]:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = {"mean": float(vals.mean()), "median": float(np.median(vals))}
    return out


def format_table(summary, label="mean"):
    """One-line summary in the usual results-table layout."""
    s = {k: v[label] for k, v in summary.items()}
    return ("ESTOI  STOI   SDR   SIR   SAR\n"
            f"{s['estoi']:.2f}   {s['stoi']:.2f}  {s['sdr_db']:4.1f}  {s['sir_db']:4.1f}  "
            f"{s['sar_db']:4.1f}")


def write_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for r in reports:
            writer.writerow([getattr(r, f) for f in REPORT_FIELDS])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricReport(r["mixture_id"], int(r["source"]),
                         *(float(r[f]) for f in REPORT_FIELDS[2:])) for r in rows]


def write_jsonl(reports, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(asdict(r)) + "\n")
