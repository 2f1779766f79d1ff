"""Dataset assembly: manifests, speaker tracks, shift augmentation, sequences."""

from collections import defaultdict
from dataclasses import dataclass
import logging

import numpy as np

from .audio_io import AudioClip, read_wav, resample
from .dsp import ComplexSpectrogram, MagnitudeSpectrogram, StftConfig, stft

log = logging.getLogger(__name__)

DEFAULT_SPLITS = {
    "train": tuple(f"L{k}" for k in range(6, 14)),
    "validation": ("L4", "L5"),
    "test": ("L1", "L2"),
}


@dataclass
class ManifestRecord:
    path: str
    speaker_id: str
    group_id: str


def read_manifest(path):
    """Parse ``path<TAB>speaker_id<TAB>group_id`` lines (UTF-8).

    Blank lines and lines starting with ``#`` are ignored.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            records.append(ManifestRecord(*parts))
    return records


def write_manifest(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.path}\t{r.speaker_id}\t{r.group_id}\n")


def split_lists(records, train_groups=DEFAULT_SPLITS["train"],
                validation_groups=DEFAULT_SPLITS["validation"],
                test_groups=DEFAULT_SPLITS["test"]):
    """Partition manifest records by group id into train/validation/test.

    Records whose group is in no split are left out.
    """
    assignment = {}
    for split, groups in (("train", train_groups), ("validation", validation_groups),
                          ("test", test_groups)):
        for g in groups:
            if g in assignment:
                raise ValueError(f"group {g!r} assigned to both {assignment[g]} and {split}")
            assignment[g] = split
    parts = {"train": [], "validation": [], "test": []}
    for r in records:
        split = assignment.get(r.group_id)
        if split is not None:
            parts[split].append(r)
    if not parts["test"]:
        log.warning("test split is empty; only training is possible")
    return parts


@dataclass
class SpeakerTrack:
    speaker_id: str
    spectrogram: ComplexSpectrogram


@dataclass
class MixtureSequence:
    """One training/evaluation unit of ``T`` frames.

    ``target1_spec``/``target2_spec`` optionally keep the complex source
    spectrograms so time-domain references can be rebuilt for evaluation.
    """

    mixture_mags: MagnitudeSpectrogram
    target1_mags: MagnitudeSpectrogram
    target2_mags: MagnitudeSpectrogram
    mixture_phase: np.ndarray
    target1_spec: ComplexSpectrogram = None
    target2_spec: ComplexSpectrogram = None


def load_speaker_audio(records, sample_rate):
    """Concatenate every record's audio per speaker, in manifest order."""
    chunks = defaultdict(list)
    for r in records:
        clip = read_wav(r.path)
        if clip.sample_rate != sample_rate:
            clip = resample(clip, sample_rate)
        chunks[r.speaker_id].append(clip.samples)
    return {spk: AudioClip(np.concatenate(parts), sample_rate) for spk, parts in chunks.items()}


def make_track(speaker_id, clip, config):
    return SpeakerTrack(speaker_id, stft(clip, config))


def _fit_length(bins, length):
    # circular tiling / cropping along time
    reps = -(-length // bins.shape[1])
    return np.tile(bins, (1, reps))[:, :length]


def shift_frames(n_shifts, total_frames):
    """Circular offsets round(n * T_s / n_shifts) mod T_s for n = 1..n_shifts."""
    return [int(round(n * total_frames / n_shifts)) % total_frames
            for n in range(1, n_shifts + 1)]


def augment_mixtures(track_a, track_b, n_shifts=30):
    """Yield ``(mixture, (source_a, source_b))`` complex spectrograms.

    ``track_b`` is circularly shifted against ``track_a`` by each offset in
    :func:`shift_frames`; both tracks are first tiled to the frame count of
    the longer one. Mixing is a complex sum at 0 dB.
    """
    if n_shifts < 1:
        raise ValueError("n_shifts must be >= 1")
    a, b = track_a.spectrogram, track_b.spectrogram
    if a.config != b.config:
        raise ValueError("tracks were analysed with different STFT configs")
    if a.n_frames == 0 or b.n_frames == 0:
        raise ValueError("empty speaker track")
    total = max(a.n_frames, b.n_frames)
    bins_a = _fit_length(a.bins, total)
    bins_b = _fit_length(b.bins, total)
    for shift in shift_frames(n_shifts, total):
        shifted = np.roll(bins_b, shift, axis=1)
        yield (ComplexSpectrogram(bins_a + shifted, a.config),
               (ComplexSpectrogram(bins_a, a.config), ComplexSpectrogram(shifted, a.config)))


def make_sequences(mixture, sources, sequence_length=256, hop_sequences=None,
                   keep_sources=False):
    """Cut aligned spectrograms into ``sequence_length``-frame units.

    Windows advance by ``hop_sequences`` (default: non-overlapping); a
    trailing partial window is dropped.
    """
    hop_sequences = hop_sequences or sequence_length
    T = mixture.n_frames
    if T < sequence_length:
        raise ValueError(
            f"{T} frames is shorter than one {sequence_length}-frame sequence")
    config = mixture.config
    s1, s2 = sources
    mags, phase = np.abs(mixture.bins), np.angle(mixture.bins)
    out = []
    for start in range(0, T - sequence_length + 1, hop_sequences):
        sl = slice(start, start + sequence_length)
        out.append(MixtureSequence(
            MagnitudeSpectrogram(mags[:, sl], config),
            MagnitudeSpectrogram(np.abs(s1.bins[:, sl]), config),
            MagnitudeSpectrogram(np.abs(s2.bins[:, sl]), config),
            phase[:, sl],
            ComplexSpectrogram(s1.bins[:, sl], config) if keep_sources else None,
            ComplexSpectrogram(s2.bins[:, sl], config) if keep_sources else None,
        ))
    return out


def build_sequences(clip_a, clip_b, stft_config=StftConfig(), n_shifts=30,
                    sequence_length=256, keep_sources=False):
    """Full pipeline from two speaker signals to augmented training sequences."""
    track_a = make_track("a", clip_a, stft_config)
    track_b = make_track("b", clip_b, stft_config)
    seqs = []
    for mixture, sources in augment_mixtures(track_a, track_b, n_shifts):
        seqs.extend(make_sequences(mixture, sources, sequence_length,
                                   keep_sources=keep_sources))
    return seqs


def build_arrays(clip_a, clip_b, stft_config=StftConfig(), n_shifts=30, sequence_length=256,
                 dtype=np.float32):
    """Like :func:`build_sequences` but straight to stacked ``(Z, Y1, Y2)``.

    Only magnitudes are kept, stored as ``dtype``; this is the low-memory
    route for large augmented training sets.
    """
    track_a = make_track("a", clip_a, stft_config)
    track_b = make_track("b", clip_b, stft_config)
    parts = ([], [], [])
    for mixture, (s1, s2) in augment_mixtures(track_a, track_b, n_shifts):
        T = mixture.n_frames
        if T < sequence_length:
            raise ValueError(
                f"{T} frames is shorter than one {sequence_length}-frame sequence")
        n = T // sequence_length
        for dst, spec in zip(parts, (mixture, s1, s2)):
            mags = np.abs(spec.bins[:, :n * sequence_length]).astype(dtype)
            dst.append(mags.reshape(mags.shape[0], n, sequence_length).transpose(1, 0, 2))
    return tuple(np.concatenate(p) for p in parts)


def stack_sequences(seqs):
    """Arrays ``(S, F, T)`` of mixture and target magnitudes."""
    Z = np.stack([s.mixture_mags.mags for s in seqs])
    Y1 = np.stack([s.target1_mags.mags for s in seqs])
    Y2 = np.stack([s.target2_mags.mags for s in seqs])
    return Z, Y1, Y2


@dataclass
class TestMixture:
    """Time-domain evaluation item: the two sources and their sum."""

    __test__ = False  # not a pytest class despite the name

    mixture_id: str
    source1: AudioClip
    source2: AudioClip

    @property
    def mixture(self):
        return AudioClip(self.source1.samples + self.source2.samples, self.source1.sample_rate)


def pair_test_mixtures(clips_a, clips_b, max_mixtures=None):
    """Every (a, b) utterance pair mixed at zero shift, cropped to the shorter."""
    out = []
    for ia, (name_a, a) in enumerate(clips_a):
        for ib, (name_b, b) in enumerate(clips_b):
            n = min(len(a), len(b))
            out.append(TestMixture(f"{name_a}+{name_b}",
                                   AudioClip(a.samples[:n], a.sample_rate),
                                   AudioClip(b.samples[:n], b.sample_rate)))
            if max_mixtures and len(out) >= max_mixtures:
                return out
    return out
