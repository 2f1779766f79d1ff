"""Training regimes, early stopping, separation and evaluation drivers."""

from dataclasses import dataclass, field, asdict
import json
import logging
import time

import numpy as np

from . import neural
from .audio_io import AudioClip
from .data import MixtureSequence, TestMixture, stack_sequences
from .dsp import ComplexSpectrogram, StftConfig, istft, stft
from .loss import EstoiLossConfig, make_loss
from .metrics import IntelligibilityConfig, aggregate, evaluate_pair

log = logging.getLogger(__name__)

REGIMES = ("mse", "estoi", "mse-then-estoi", "combined")


@dataclass
class TrainConfig:
    regime: str = "mse"
    alpha: float = 1.0
    max_epochs: int = 200
    patience: int = 30
    batch_size: int = 8
    seed: int = 0
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    keep_optimizer_state: bool = False
    steps_per_epoch: int = None
    checkpoint_path: str = None
    log_path: str = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    val_loss: float
    wall_clock: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = None
    phase_best: dict = field(default_factory=dict)
    handoff: object = None

    def phase(self, name):
        return [r for r in self.records if r.phase == name]

    @property
    def val_losses(self):
        return [r.val_loss for r in self.records]


class EarlyStopping:
    """Stop once the monitored loss has failed to improve for ``patience``
    consecutive epochs. Only a strict decrease counts as improvement.
    """

    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = None
        self.wait = 0
        self.epoch = -1

    def update(self, value):
        """Record one epoch's value; returns True when training should stop."""
        self.epoch += 1
        if value < self.best:
            self.best = value
            self.best_epoch = self.epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def run_trace(values, patience):
    """Replay a validation-loss trace: ``(stop_epoch, best_epoch)``, 0-based.

    ``stop_epoch`` is None when the trace ends before patience runs out.
    """
    es = EarlyStopping(patience)
    for value in values:
        if es.update(value):
            return es.epoch, es.best_epoch
    return None, es.best_epoch


def _batches(n, batch_size, rng, steps=None):
    """Shuffled minibatch indices; ``steps`` caps the number of batches."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return batches[:steps] if steps else batches


def _loss_fn(regime, loss_config, alpha):
    if regime == "combined":
        return make_loss("combined", loss_config, alpha)
    return make_loss(regime, loss_config)


def dataset_loss(model, arrays, loss_fn, batch_size=32):
    """Mean loss over a stacked dataset, weighting batches by size."""
    Z, Y1, Y2 = arrays
    total, count = 0.0, 0
    for start in range(0, Z.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        res = neural.forward(model, _f64(Z[sl]))
        out = loss_fn(res.est1, res.est2, _f64(Y1[sl]), _f64(Y2[sl]))
        total += out.value * Z[sl].shape[0]
        count += Z[sl].shape[0]
    return total / count


def _f64(a):
    return np.asarray(a, dtype=np.float64)


def train_step(model, state, Zb, Y1b, Y2b, loss_fn, clip_norm):
    Zb, Y1b, Y2b = _f64(Zb), _f64(Y1b), _f64(Y2b)
    res = neural.forward(model, Zb)
    out = loss_fn(res.est1, res.est2, Y1b, Y2b)
    if not np.isfinite(out.value):
        raise neural.DivergenceError(f"non-finite training loss {out.value}")
    grads = neural.backward(model, res.tape, out.grad_source1, out.grad_source2)
    neural.clip_global_norm(grads, clip_norm)
    neural.adam_step(model, grads, state)
    return out.value


def _write_log(path, record):
    if path:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(record)) + "\n")


def _run_phase(model, state, phase, loss_fn, train, val, config, rng, history, epoch0,
               on_epoch=None):
    """Train until patience or ``max_epochs``; returns the best model of the phase."""
    stopper = EarlyStopping(config.patience)
    best_model = model.copy()
    best_state = None
    Z, Y1, Y2 = train
    for k in range(config.max_epochs):
        t0 = time.perf_counter()
        losses, sizes = [], []
        for idx in _batches(Z.shape[0], config.batch_size, rng, config.steps_per_epoch):
            try:
                losses.append(train_step(model, state, Z[idx], Y1[idx], Y2[idx], loss_fn,
                                         config.clip_norm))
            except neural.DivergenceError as exc:
                exc.model = best_model
                raise
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        val_loss = dataset_loss(model, val, loss_fn)
        if not np.isfinite(val_loss):
            exc = neural.DivergenceError(f"non-finite validation loss in {phase} phase")
            exc.model = best_model
            raise exc
        rec = EpochRecord(epoch0 + k, phase, train_loss, val_loss, time.perf_counter() - t0)
        history.records.append(rec)
        _write_log(config.log_path, rec)
        log.info("epoch %d [%s] train %.5f val %.5f", rec.epoch, phase, train_loss, val_loss)
        stop = stopper.update(val_loss)
        if stopper.best_epoch == k:
            best_model = model.copy()
            best_state = _copy_state(state)
            history.best_epoch = epoch0 + k
            history.phase_best[phase] = epoch0 + k
            if config.checkpoint_path:
                neural.save_model(best_model, best_state, config.checkpoint_path)
        if on_epoch is not None:
            on_epoch(rec, model)
        if stop:
            break
    return best_model, best_state, epoch0 + len(history.phase(phase))


def _copy_state(state):
    return neural.AdamState({k: v.copy() for k, v in state.m.items()},
                            {k: v.copy() for k, v in state.v.items()}, state.step,
                            state.learning_rate, state.beta1, state.beta2, state.eps)


def train(config, train_set, val_set, model=None, loss_config=None, hidden_sizes=(512, 512, 512),
          on_epoch=None):
    """Train a separation model under ``config.regime``.

    ``train_set`` and ``val_set`` are lists of :class:`MixtureSequence`
    (or ``(Z, Y1, Y2)`` stacked arrays). Returns ``(model, history)`` where
    ``model`` is the best-validation checkpoint of the final phase. For
    ``mse-then-estoi`` the ESTOI phase starts from the best MSE weights
    with fresh Adam moments unless ``keep_optimizer_state`` is set;
    ``history.handoff`` holds a copy of those starting weights.
    """
    if not len(train_set) or not len(val_set):
        raise ValueError("training and validation sets must be non-empty")
    train_arr = stack_sequences(train_set) if isinstance(train_set[0], MixtureSequence) else train_set
    val_arr = stack_sequences(val_set) if isinstance(val_set[0], MixtureSequence) else val_set
    n_freq = train_arr[0].shape[1]
    if loss_config is None:
        loss_config = EstoiLossConfig.default()
    if model is None:
        model = neural.init_model(n_freq, hidden_sizes, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()

    def new_state():
        return neural.AdamState.for_model(model, learning_rate=config.learning_rate)

    state = new_state()
    if config.regime == "mse-then-estoi":
        phases = [("mse", _loss_fn("mse", loss_config, 0.0)),
                  ("estoi", _loss_fn("estoi", loss_config, 0.0))]
    else:
        phases = [(config.regime, _loss_fn(config.regime, loss_config, config.alpha))]

    epoch = 0
    best_model = model
    for k, (phase, loss_fn) in enumerate(phases):
        if k > 0:
            model = best_model.copy()
            history.handoff = best_model.copy()
            if config.keep_optimizer_state and best_state is not None:
                state = _copy_state(best_state)
            else:
                state = new_state()
        best_model, best_state, epoch = _run_phase(
            model, state, phase, loss_fn, train_arr, val_arr, config, rng, history, epoch,
            on_epoch)
    return best_model, history


# ---------------------------------------------------------------------------
# Inference

def _model_stft_config(model):
    cfg = model.configs.get("stft")
    return StftConfig(**cfg) if cfg else StftConfig()


def mask_sequence(model, mags, sequence_length=256):
    """Masks for an ``(F, T)`` magnitude spectrogram, processed in
    independent ``sequence_length``-frame windows (last one zero-padded).

    Windows are run one at a time so that the arithmetic for a window never
    depends on how many follow it; masks of a truncated input are then
    bitwise equal to the corresponding prefix of the full run.
    """
    mags = np.asarray(mags, dtype=np.float64)
    F, T = mags.shape
    out = np.empty((F, T))
    for start in range(0, T, sequence_length):
        stop = min(start + sequence_length, T)
        window = np.zeros((F, sequence_length))
        window[:, :stop - start] = mags[:, start:stop]
        out[:, start:stop] = neural.forward(model, window).mask[:, :stop - start]
    return out


def separate(model, mixture, sequence_length=None, return_mask=False):
    """Split ``mixture`` into two clips of the same length.

    Both estimates reuse the mixture phase; the clip is zero-padded to a
    whole number of frames and the padding is trimmed after synthesis.
    """
    config = _model_stft_config(model)
    if sequence_length is None:
        sequence_length = model.configs.get("sequence_length", 256)
    if mixture.sample_rate != config.sample_rate:
        raise ValueError(
            f"mixture sample rate {mixture.sample_rate} Hz; model requires "
            f"{config.sample_rate} Hz")
    n = len(mixture)
    frames = 1 + -(-(max(n, config.window_length) - config.window_length) // config.hop)
    padded_len = (frames - 1) * config.hop + config.window_length
    samples = np.concatenate([mixture.samples, np.zeros(padded_len - n)])
    spec = stft(AudioClip(samples, mixture.sample_rate), config)
    mask = mask_sequence(model, np.abs(spec.bins), sequence_length)
    out1 = istft(ComplexSpectrogram(mask * spec.bins, config), length=n)
    out2 = istft(ComplexSpectrogram((1.0 - mask) * spec.bins, config), length=n)
    if return_mask:
        return out1, out2, mask
    return out1, out2


def evaluate(model, test_items, metric_config=None, filter_len=512):
    """Separate every test item and score both sources.

    ``test_items`` are :class:`TestMixture` objects or
    :class:`MixtureSequence` objects carrying complex targets. Returns
    ``(reports, summary)`` with per-source rows and mean/median aggregates.
    """
    if not test_items:
        raise ValueError("empty test set")
    config = _model_stft_config(model)
    metric_config = metric_config or IntelligibilityConfig.native(config)
    reports = []
    for k, item in enumerate(test_items):
        if isinstance(item, TestMixture):
            if item.source1.sample_rate != config.sample_rate:
                raise ValueError("test audio sample rate does not match the model")
            refs = (item.source1, item.source2)
            est = separate(model, item.mixture)
            mix_id = item.mixture_id
        else:
            if item.target1_spec is None:
                raise ValueError("sequence lacks complex targets needed for evaluation")
            if item.mixture_mags.config != config:
                raise ValueError("sequence STFT config does not match the model")
            n = (item.mixture_mags.n_frames - 1) * config.hop + config.window_length
            refs = (istft(item.target1_spec, n), istft(item.target2_spec, n))
            mix = ComplexSpectrogram(item.target1_spec.bins + item.target2_spec.bins, config)
            mask = mask_sequence(model, item.mixture_mags.mags, item.mixture_mags.n_frames)
            est = (istft(ComplexSpectrogram(mask * mix.bins, config), n),
                   istft(ComplexSpectrogram((1 - mask) * mix.bins, config), n))
            mix_id = f"seq{k}"
        reports.extend(evaluate_pair(mix_id, refs, est, metric_config, filter_len))
    return reports, aggregate(reports)
