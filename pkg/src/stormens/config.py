"""Experiment configuration: a flat, human-editable key=value document.

Sections map 1:1 onto dataclasses below; every value round-trips through
the file form losslessly. All stage seeds derive from the single global
seed, so one (config, seed) pair pins the entire experiment.
"""

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields

from .cgan import CganConfig
from .errors import ConfigError
from .neural import TrainConfig
from .seeding import derive_seed
from .severe_models import ClassifierConfig, EncoderConfig, MlpConfig
from .stormgen import SynthConfig


@dataclass
class ArchiveConfig:
    n_days: int = 220
    verify_days: int = 20
    clim_years: int = 2
    coarse_rows: int = 6
    coarse_cols: int = 6
    with_fields: bool = False
    cache_days: int = 230
    normalize_sample_days: int = 10


@dataclass
class CganStageConfig:
    widths: tuple = (8, 12, 16)
    bottleneck: int = 24
    disc_widths: tuple = (8, 12, 16)
    lam: float = 1.0
    noise_sigma: float = 0.5
    non_saturating: bool = False
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    decay: float = 0.99
    train_pairs: int = 800
    storm_fraction: float = 0.5


@dataclass
class EncoderStageConfig:
    widths: tuple = (8, 12, 16, 128)
    epochs: int = 10
    patience: int = 4
    batch_size: int = 32
    learning_rate: float = 1e-3
    decay: float = 0.99
    neg_per_pos: int = 10


@dataclass
class ClassifierStageConfig:
    conv_kernels: int = 128
    conv_len: int = 2
    dense_units: int = 64
    dropout: float = 0.1
    epochs: int = 30
    patience: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    decay: float = 0.99
    neg_per_pos: int = 1


@dataclass
class MlpStageConfig:
    hidden: tuple = (128, 64)
    dropout: float = 0.1
    epochs: int = 40
    patience: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    decay: float = 0.99
    neg_per_pos: int = 1


@dataclass
class EnsembleStageConfig:
    k_members: int = 10
    m_members: int = 10
    cgan_mc_draws: int = 1


@dataclass
class VerificationStageConfig:
    reliability_bins: int = 20
    n_boot: int = 100
    spread_bins: int = 10
    discard_step: float = 0.05
    discard_max: float = 0.5
    perm_shuffles: int = 20
    perm_subset: int = 150
    fidelity_patches: int = 200
    fidelity_uh_threshold: float = 0.25
    mask_min_reports: int = 0  # 0 means the scaled default
    plots: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    stormgen: SynthConfig = field(default_factory=SynthConfig)
    archive: ArchiveConfig = field(default_factory=ArchiveConfig)
    cgan: CganStageConfig = field(default_factory=CganStageConfig)
    encoder: EncoderStageConfig = field(default_factory=EncoderStageConfig)
    classifier: ClassifierStageConfig = field(default_factory=ClassifierStageConfig)
    mlp: MlpStageConfig = field(default_factory=MlpStageConfig)
    ensemble: EnsembleStageConfig = field(default_factory=EnsembleStageConfig)
    verification: VerificationStageConfig = field(default_factory=VerificationStageConfig)

    def __post_init__(self):
        # stormgen's own seed always follows the global seed
        self.stormgen.seed = derive_seed(self.seed, "stormgen")

    def stage_seed(self, stage):
        return derive_seed(self.seed, stage)

    def cgan_config(self):
        c = self.cgan
        return CganConfig(
            lam=c.lam, noise_sigma=c.noise_sigma, widths=tuple(c.widths),
            bottleneck=c.bottleneck, disc_widths=tuple(c.disc_widths),
            non_saturating=c.non_saturating,
            train=TrainConfig(learning_rate=c.learning_rate, decay=c.decay,
                              batch_size=c.batch_size, max_epochs=c.epochs,
                              seed=self.stage_seed("train-cgan")),
        )

    def encoder_config(self):
        return EncoderConfig(widths=tuple(self.encoder.widths))

    def encoder_train_config(self):
        e = self.encoder
        return TrainConfig(learning_rate=e.learning_rate, decay=e.decay,
                           batch_size=e.batch_size, max_epochs=e.epochs,
                           early_stop_patience=e.patience,
                           seed=self.stage_seed("train-encoder"))

    def classifier_config(self):
        c = self.classifier
        return ClassifierConfig(conv_kernels=c.conv_kernels, conv_len=c.conv_len,
                                dense_units=c.dense_units, dropout=c.dropout)

    def classifier_train_config(self, window):
        c = self.classifier
        return TrainConfig(learning_rate=c.learning_rate, decay=c.decay,
                           batch_size=c.batch_size, max_epochs=c.epochs,
                           early_stop_patience=c.patience,
                           seed=derive_seed(self.seed, "train-classifier", window))

    def mlp_config(self):
        m = self.mlp
        return MlpConfig(hidden=tuple(m.hidden), dropout=m.dropout)

    def mlp_train_config(self):
        m = self.mlp
        return TrainConfig(learning_rate=m.learning_rate, decay=m.decay,
                           batch_size=m.batch_size, max_epochs=m.epochs,
                           early_stop_patience=m.patience,
                           seed=self.stage_seed("train-mlp"))


_SECTIONS = {
    "stormgen": SynthConfig,
    "archive": ArchiveConfig,
    "cgan": CganStageConfig,
    "encoder": EncoderStageConfig,
    "classifier": ClassifierStageConfig,
    "mlp": MlpStageConfig,
    "ensemble": EnsembleStageConfig,
    "verification": VerificationStageConfig,
}


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _parse_value(text, like):
    if isinstance(like, bool):
        if text.lower() not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(like, (tuple, list)):
        parts = [p for p in text.split(",") if p != ""]
        elem = like[0] if len(like) else 0.0
        return tuple(_parse_value(p.strip(), elem) for p in parts)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def config_to_text(cfg):
    parser = configparser.ConfigParser()
    parser["experiment"] = {"seed": str(cfg.seed)}
    for section, _ in _SECTIONS.items():
        obj = getattr(cfg, section)
        parser[section] = {}
        for f in fields(obj):
            if section == "stormgen" and f.name == "seed":
                continue  # derived from the global seed
            parser[section][f.name] = _format_value(getattr(obj, f.name))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_from_text(text):
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if "experiment" not in parser or "seed" not in parser["experiment"]:
        raise ConfigError("config needs an [experiment] section with a seed")
    try:
        seed = int(parser["experiment"]["seed"])
    except ValueError as exc:
        raise ConfigError(f"bad seed: {exc}") from exc
    kwargs = {"seed": seed}
    for section, cls in _SECTIONS.items():
        defaults = cls()
        if section not in parser:
            kwargs[section] = defaults
            continue
        values = {}
        known = {f.name for f in fields(cls)}
        for key, raw in parser[section].items():
            if key == "seed" and section == "stormgen":
                continue
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}")
            try:
                values[key] = _parse_value(raw, getattr(defaults, key))
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"bad value [{section}] {key} = {raw!r}: {exc}") from exc
        kwargs[section] = cls(**{
            f.name: values.get(f.name, getattr(defaults, f.name)) for f in fields(cls)
        })
    return ExperimentConfig(**kwargs)


def save_config(cfg, path):
    path.write_text(config_to_text(cfg))


def load_config(path):
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_text(text)


def config_hash(cfg):
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).hexdigest()
