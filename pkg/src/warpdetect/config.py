"""Experiment configuration: a plain-text nested key-value document with
strict schema checking, lossless float round-trips (17 significant
digits), and flags > config > defaults precedence."""

from dataclasses import asdict, dataclass, field, fields

import yaml

from .detect import DetectConfig
from .errors import ConfigurationError
from .models import VARIANTS, ModelConfig
from .scenes import DatasetConfig
from .stn import StnConfig
from .train import TrainConfig


class _Dumper(yaml.SafeDumper):
    pass


def _float_representer(dumper, value):
    if value != value:                  # NaN
        return dumper.represent_scalar("tag:yaml.org,2002:float", ".nan")
    if value in (float("inf"), float("-inf")):
        tag = ".inf" if value > 0 else "-.inf"
        return dumper.represent_scalar("tag:yaml.org,2002:float", tag)
    text = f"{value:.17g}"
    if "." not in text and "e" not in text and "n" not in text:
        text += ".0"
    return dumper.represent_scalar("tag:yaml.org,2002:float", text)


_Dumper.add_representer(float, _float_representer)


def dump_doc(data):
    """Serialize with stable field order and exact float text."""
    return yaml.dump(data, Dumper=_Dumper, sort_keys=False,
                     default_flow_style=False)


def load_doc(text):
    return yaml.safe_load(text)


def write_doc(path, data):
    with open(path, "w") as fh:
        fh.write(dump_doc(data))


def read_doc(path):
    with open(path) as fh:
        return load_doc(fh.read())


@dataclass
class ModelSection:
    backbone_channels: tuple = (8, 16, 32)

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)


@dataclass
class ExperimentSection:
    variants: tuple = ("yolo", "stn", "stn_tps", "cbam_stn", "cbam_stn_tps")
    seeds: tuple = (1, 2, 3)
    tta: bool = False

    def __post_init__(self):
        self.variants = tuple(self.variants)
        self.seeds = tuple(int(s) for s in self.seeds)
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigurationError(f"unknown variant {v!r}")
        if not self.variants or not self.seeds:
            raise ConfigurationError("variants and seeds must be nonempty")


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSection = field(default_factory=ModelSection)
    stn: StnConfig = field(default_factory=StnConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    SECTIONS = ("dataset", "model", "stn", "detect", "train", "experiment")

    def to_dict(self):
        out = {}
        for name in self.SECTIONS:
            section = getattr(self, name)
            d = {}
            for f in fields(section):
                v = getattr(section, f.name)
                d[f.name] = list(v) if isinstance(v, tuple) else v
            out[name] = d
        return out

    def model_config(self, variant):
        """ModelConfig for one variant, with derived fields filled in."""
        ds = self.dataset
        grid = ds.image_size // 8
        det = DetectConfig(
            num_classes=ds.num_classes, grid_size=grid,
            dfl_bins=self.detect.dfl_bins,
            score_threshold=self.detect.score_threshold,
            nms_iou_threshold=self.detect.nms_iou_threshold,
            lambda_box=self.detect.lambda_box,
            lambda_dfl=self.detect.lambda_dfl)
        return ModelConfig(variant=variant, image_size=ds.image_size,
                           in_channels=3,
                           backbone_channels=self.model.backbone_channels,
                           stn=self.stn, detect=det)


_SECTION_TYPES = {"dataset": DatasetConfig, "model": ModelSection,
                  "stn": StnConfig, "detect": DetectConfig,
                  "train": TrainConfig, "experiment": ExperimentSection}

# derived at runtime; rejected in config files to avoid inconsistency
_EXCLUDED_KEYS = {"detect": {"num_classes", "grid_size"}, "stn": {"mode"}}


def config_from_dict(data):
    """Strict construction: unknown sections or keys are rejected."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping")
    unknown = set(data) - set(RunConfig.SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {sorted(unknown)}")
    kwargs = {}
    for name in RunConfig.SECTIONS:
        cls = _SECTION_TYPES[name]
        section_data = data.get(name, {}) or {}
        if not isinstance(section_data, dict):
            raise ConfigurationError(f"section {name!r} must be a mapping")
        allowed = {f.name for f in fields(cls)} - _EXCLUDED_KEYS.get(name, set())
        bad = set(section_data) - allowed
        if bad:
            raise ConfigurationError(
                f"unknown key(s) in section {name!r}: {sorted(bad)}")
        kwargs[name] = cls(**section_data)
    cfg = RunConfig(**kwargs)
    if cfg.dataset.image_size % 8:
        raise ConfigurationError("dataset.image_size must be divisible by 8")
    return cfg


def load_config(path, overrides=None):
    """Read a config file and apply dotted-path overrides (flag values)."""
    data = read_doc(path) if path else {}
    data = data or {}
    for key, value in (overrides or {}).items():
        section, _, leaf = key.partition(".")
        if not leaf:
            raise ConfigurationError(f"override {key!r} must be section.key")
        data.setdefault(section, {})[leaf] = value
    return config_from_dict(data)


def save_config(path, cfg):
    write_doc(path, cfg.to_dict())
