"""Synthetic two-"speaker" material standing in for a speech corpus.

Each pseudo-speaker is band-limited noise and a harmonic voiced part,
gated by a syllable-rate on/off envelope. Two profiles are provided:
``disjoint`` speakers occupy non-overlapping frequency regions (an ideal
binary mask separates them), ``overlapping`` speakers share part of the
spectrum and differ in pitch range and spectral shape.
"""

import numpy as np

from .audio_io import AudioClip

PROFILES = {
    "disjoint": (
        {"bands": [(200, 900), (2000, 2900), (4200, 5200)], "f0": None, "noise": 1.0},
        {"bands": [(1200, 1700), (3300, 3800), (5700, 7200)], "f0": None, "noise": 1.0},
    ),
    "overlapping": (
        {"bands": [(100, 1400), (2200, 3200)], "f0": (95.0, 140.0), "noise": 0.4},
        {"bands": [(700, 2400), (3000, 5000)], "f0": (190.0, 260.0), "noise": 0.4},
    ),
}


def syllable_envelope(rng, n, sample_rate, on=(0.12, 0.35), off=(0.04, 0.2)):
    """Raised-cosine bursts separated by silent gaps."""
    env = np.zeros(n)
    pos = int(rng.uniform(*off) * sample_rate)
    while pos < n:
        length = int(rng.uniform(*on) * sample_rate)
        seg = np.sin(np.pi * (np.arange(length) + 0.5) / length) ** 0.5
        seg = seg[:max(0, n - pos)]
        env[pos:pos + seg.size] = seg * rng.uniform(0.4, 1.0)
        pos += length + int(rng.uniform(*off) * sample_rate)
    return env


def band_noise(rng, n, sample_rate, bands):
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    keep = np.zeros(freqs.size, dtype=bool)
    for lo, hi in bands:
        keep |= (freqs >= lo) & (freqs <= hi)
    out = np.fft.irfft(spec * keep, n)
    return out / (np.std(out) + 1e-12)


def harmonic_voice(rng, n, sample_rate, f0_range, bands):
    """Glottal-like harmonic series restricted to ``bands``, slowly gliding pitch."""
    t = np.arange(n) / sample_rate
    lo, hi = f0_range
    knots = rng.uniform(lo, hi, size=int(t[-1] * 4) + 2)
    f0 = np.interp(t, np.linspace(0, t[-1], knots.size), knots)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    out = np.zeros(n)
    for k in range(1, int(sample_rate / 2 / lo)):
        fk = k * f0
        gain = np.zeros(n)
        for blo, bhi in bands:
            gain += ((fk >= blo) & (fk <= bhi)) / np.sqrt(k)
        if gain.any():
            out += gain * np.sin(k * phase)
    return out / (np.std(out) + 1e-12)


def pseudo_speaker(rng, duration, sample_rate, profile):
    n = int(round(duration * sample_rate))
    sig = profile["noise"] * band_noise(rng, n, sample_rate, profile["bands"])
    if profile["f0"] is not None:
        sig = sig + harmonic_voice(rng, n, sample_rate, profile["f0"], profile["bands"])
    sig *= syllable_envelope(rng, n, sample_rate)
    return sig


def speaker_pair(duration, sample_rate=16000, kind="disjoint", seed=0, level=0.1):
    """Two independent pseudo-speaker signals of ``duration`` seconds each."""
    rng = np.random.default_rng(seed)
    profiles = PROFILES[kind]
    clips = []
    for prof in profiles:
        sig = pseudo_speaker(rng, duration, sample_rate, prof)
        sig *= level / (np.sqrt(np.mean(sig ** 2)) + 1e-12)
        clips.append(AudioClip(np.clip(sig, -1.0, 1.0), sample_rate))
    return clips[0], clips[1]
