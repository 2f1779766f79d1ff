"""Small end-to-end comparison of the training regimes on synthetic speakers."""

from dataclasses import dataclass
import logging
import time

import numpy as np

from .audio_io import AudioClip
from .data import TestMixture, build_arrays
from .dsp import StftConfig
from .loss import EstoiLossConfig
from .synthetic import speaker_pair
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger(__name__)


@dataclass
class ToySetup:
    minutes: float = 3.0
    kind: str = "overlapping"
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    n_shifts: int = 30
    val_shifts: int = 3
    sequence_length: int = 256
    test_clip_seconds: float = 6.0
    hidden: int = 64
    batch_size: int = 32
    steps_per_epoch: int = 8
    max_epochs: int = 20
    patience: int = 5
    corpus_seed: int = 1234


def _crop(clip, start, stop):
    sr = clip.sample_rate
    return AudioClip(clip.samples[int(start * sr):int(stop * sr)], sr)


def toy_corpus(setup, stft_config=StftConfig()):
    """Augmented train/validation sequences and zero-shift test mixtures."""
    total = setup.minutes * 60.0
    a, b = speaker_pair(total, stft_config.sample_rate, setup.kind, seed=setup.corpus_seed)
    t_train = total * setup.train_fraction
    t_val = t_train + total * setup.val_fraction
    train_set = build_arrays(_crop(a, 0, t_train), _crop(b, 0, t_train), stft_config,
                               setup.n_shifts, setup.sequence_length)
    val_set = build_arrays(_crop(a, t_train, t_val), _crop(b, t_train, t_val), stft_config,
                             setup.val_shifts, setup.sequence_length)
    tests = []
    start, k = t_val, 0
    while start + setup.test_clip_seconds <= total + 1e-9:
        stop = start + setup.test_clip_seconds
        tests.append(TestMixture(f"toy{k}", _crop(a, start, stop), _crop(b, start, stop)))
        start, k = stop, k + 1
    return train_set, val_set, tests


def compare_regimes(setup=ToySetup(), seeds=(0, 1, 2), stft_config=StftConfig()):
    """Train MSE-DNN, ESTOI-DNN and MSE-ESTOI-DNN per seed and score them.

    The MSE-DNN of a seed is the first phase of that seed's MSE-then-ESTOI
    run, which is identical to a standalone MSE run with the same seed.
    Returns ``{name: [summary per seed]}``.
    """
    train_set, val_set, tests = toy_corpus(setup, stft_config)
    loss_config = EstoiLossConfig.default(stft_config)
    results = {"MSE-DNN": [], "ESTOI-DNN": [], "MSE-ESTOI-DNN": []}
    for seed in seeds:
        common = dict(max_epochs=setup.max_epochs, patience=setup.patience,
                      batch_size=setup.batch_size, steps_per_epoch=setup.steps_per_epoch,
                      seed=seed)
        t0 = time.perf_counter()
        model_pre, hist_pre = train(TrainConfig(regime="mse-then-estoi", **common),
                                    train_set, val_set, loss_config=loss_config,
                                    hidden_sizes=[setup.hidden])
        model_est, _ = train(TrainConfig(regime="estoi", **common), train_set, val_set,
                             loss_config=loss_config, hidden_sizes=[setup.hidden])
        for name, model in (("MSE-DNN", hist_pre.handoff), ("ESTOI-DNN", model_est),
                            ("MSE-ESTOI-DNN", model_pre)):
            model.configs["stft"] = stft_config.to_dict()
            _, summary = evaluate(model, tests)
            results[name].append(summary)
        log.info("seed %d done in %.1fs", seed, time.perf_counter() - t0)
    return results


def mean_over_seeds(per_seed, metric):
    return float(np.mean([s[metric]["mean"] for s in per_seed]))
