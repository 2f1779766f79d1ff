"""Declarative run configuration (TOML) with validation and flag overrides.

A run file has up to seven tables, all optional::

    [stft]      window_length, hop, fft_size, window, sample_rate
    [bands]     lowest_center, max_freq, drop_empty
    [loss]      segment_seconds, epsilon, alpha
    [model]     hidden_sizes, feature_scale
    [training]  regime, max_epochs, patience, batch_size, seed, learning_rate,
                clip_norm, keep_optimizer_state, steps_per_epoch
    [data]      manifest, train_groups, validation_groups, test_groups,
                speakers, n_shifts, sequence_length
    [output]    directory

Everything is validated by building the module-level config objects
before any audio is touched.
"""

from dataclasses import dataclass, field, asdict, fields
import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import DEFAULT_SPLITS
from .dsp import StftConfig
from .loss import SEGMENT_SECONDS, EstoiLossConfig, segment_frames_for
from .octave import make_band_config
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class StftSection:
    window_length: int = 128
    hop: int = 64
    fft_size: int = None
    window: str = "sqrt_hann"
    sample_rate: int = 16000


@dataclass
class BandsSection:
    lowest_center: float = 150.0
    max_freq: float = 8000.0
    drop_empty: bool = True


@dataclass
class LossSection:
    segment_seconds: float = SEGMENT_SECONDS
    epsilon: float = 1e-9
    alpha: float = 1.0


@dataclass
class ModelSection:
    hidden_sizes: list = field(default_factory=lambda: [512, 512, 512])
    feature_scale: float = 1.0


@dataclass
class TrainingSection:
    regime: str = "mse"
    max_epochs: int = 200
    patience: int = 30
    batch_size: int = 8
    seed: int = 0
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    keep_optimizer_state: bool = False
    steps_per_epoch: int = None


@dataclass
class DataSection:
    manifest: str = None
    train_groups: list = field(default_factory=lambda: list(DEFAULT_SPLITS["train"]))
    validation_groups: list = field(default_factory=lambda: list(DEFAULT_SPLITS["validation"]))
    test_groups: list = field(default_factory=lambda: list(DEFAULT_SPLITS["test"]))
    speakers: list = None
    n_shifts: int = 30
    sequence_length: int = 256


@dataclass
class OutputSection:
    directory: str = "runs/default"


SECTIONS = {
    "stft": StftSection, "bands": BandsSection, "loss": LossSection, "model": ModelSection,
    "training": TrainingSection, "data": DataSection, "output": OutputSection,
}


@dataclass
class RunConfig:
    stft: StftSection = field(default_factory=StftSection)
    bands: BandsSection = field(default_factory=BandsSection)
    loss: LossSection = field(default_factory=LossSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, tree):
        unknown = set(tree) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            values = dict(tree.get(name, {}))
            allowed = {f.name for f in fields(section_cls)}
            bad = set(values) - allowed
            if bad:
                raise ConfigError(f"[{name}] unknown key(s): {', '.join(sorted(bad))}")
            kwargs[name] = section_cls(**values)
        return cls(**kwargs)

    def to_dict(self):
        return asdict(self)

    def override(self, section, key, value):
        """Apply a command-line value; ``None`` means "not given"."""
        if value is not None:
            setattr(getattr(self, section), key, value)

    # -- derived module configs ------------------------------------------

    def stft_config(self):
        return StftConfig(**asdict(self.stft))

    def band_config(self):
        s = self.stft_config()
        return make_band_config(s.sample_rate, s.fft_size, self.bands.lowest_center,
                                self.bands.max_freq, drop_empty=self.bands.drop_empty)

    def loss_config(self):
        s = self.stft_config()
        return EstoiLossConfig(self.band_config(),
                               segment_frames_for(s, self.loss.segment_seconds),
                               self.loss.epsilon)

    def train_config(self, checkpoint_path=None, log_path=None):
        t = self.training
        return TrainConfig(regime=t.regime, alpha=self.loss.alpha, max_epochs=t.max_epochs,
                           patience=t.patience, batch_size=t.batch_size, seed=t.seed,
                           learning_rate=t.learning_rate, clip_norm=t.clip_norm,
                           keep_optimizer_state=t.keep_optimizer_state,
                           steps_per_epoch=t.steps_per_epoch,
                           checkpoint_path=checkpoint_path, log_path=log_path)

    def validate(self):
        """Build every derived config; raise :class:`ConfigError` on failure."""
        try:
            s = self.stft_config()
            if s.n_freq < 2:
                raise ValueError("fft_size too small")
            self.loss_config()
            self.train_config()
            if not self.model.hidden_sizes or any(int(h) < 1 for h in self.model.hidden_sizes):
                raise ValueError("model.hidden_sizes must be a non-empty list of positive sizes")
            if self.model.feature_scale <= 0:
                raise ValueError("model.feature_scale must be positive")
            if self.data.n_shifts < 1:
                raise ValueError("data.n_shifts must be >= 1")
            if self.data.sequence_length < 1:
                raise ValueError("data.sequence_length must be >= 1")
            N = self.loss_config().segment_frames
            if self.training.regime != "mse" and self.data.sequence_length < N:
                raise ValueError(
                    f"data.sequence_length {self.data.sequence_length} is shorter than the "
                    f"{N}-frame ESTOI segment required by regime {self.training.regime!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        return self

    def model_configs(self):
        """Config block embedded in checkpoints."""
        return {"stft": self.stft_config().to_dict(), "bands": self.band_config().to_dict(),
                "loss": {"segment_frames": self.loss_config().segment_frames,
                         "epsilon": self.loss.epsilon},
                "sequence_length": self.data.sequence_length}

    def dump(self, path):
        """Write the effective configuration as JSON."""
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_config(path=None):
    """Parse a TOML run file (or the defaults when ``path`` is None)."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            tree = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return RunConfig.from_dict(tree)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
