"""Pipeline configuration: one JSON document, validated before any work starts.

Layout::

    {
      "paths": {"color_model": ..., "checkpoint": ..., "feature_weights": ..., "data_root": ...},
      "colorseg": {"target_regions": 400, "min_area": 50, "margin": 0.15, "superpixel_area": null},
      "yield": {"linking_radius": 0.10, "corridor_radius": 0.05, "ground_height": 0.25,
                "iou_threshold": 0.1},
      "seed": 0
    }

Relative paths resolve against the config file's directory. Command-line
flags override config values, which override the defaults.
"""
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Validation failure; ``errors`` maps dotted field names to messages."""

    def __init__(self, errors):
        self.errors = dict(errors)
        super().__init__("; ".join(f"{k}: {v}" for k, v in self.errors.items()))


@dataclass
class Paths:
    color_model: str = None
    checkpoint: str = None
    feature_weights: str = None
    data_root: str = None


@dataclass
class ColorsegParams:
    target_regions: int = 400
    min_area: int = 50
    margin: float = 0.15
    superpixel_area: float = None


@dataclass
class YieldParams:
    linking_radius: float = 0.10
    corridor_radius: float = 0.05
    ground_height: float = 0.25
    iou_threshold: float = 0.1


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    colorseg: ColorsegParams = field(default_factory=ColorsegParams)
    yield_: YieldParams = field(default_factory=YieldParams)
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["yield"] = d.pop("yield_")
        return d

    def validate(self, required_paths=()):
        errors = {}
        for name in required_paths:
            if getattr(self.paths, name) is None:
                errors[f"paths.{name}"] = "required by this command"
        for f in fields(Paths):
            value = getattr(self.paths, f.name)
            if value is not None and not Path(value).exists():
                errors[f"paths.{f.name}"] = f"does not exist: {value}"
        c = self.colorseg
        if not (isinstance(c.target_regions, int) and c.target_regions >= 1):
            errors["colorseg.target_regions"] = "must be a positive integer"
        if not (isinstance(c.min_area, int) and c.min_area >= 1):
            errors["colorseg.min_area"] = "must be a positive integer"
        if not 0.0 <= c.margin <= 1.0:
            errors["colorseg.margin"] = "must lie in [0, 1]"
        if c.superpixel_area is not None and c.superpixel_area <= 0:
            errors["colorseg.superpixel_area"] = "must be positive"
        y = self.yield_
        for name in ("linking_radius", "corridor_radius"):
            if not 0.0 < getattr(y, name) <= 10.0:
                errors[f"yield.{name}"] = "must lie in (0, 10] meters"
        if not 0.0 <= y.iou_threshold <= 1.0:
            errors["yield.iou_threshold"] = "must lie in [0, 1]"
        if not isinstance(self.seed, int) or self.seed < 0:
            errors["seed"] = "must be a nonnegative integer"
        if errors:
            raise ConfigError(errors)
        return self


_SECTIONS = {"paths": Paths, "colorseg": ColorsegParams, "yield": YieldParams}


def config_from_dict(doc, base_dir=None):
    """Build a config from a parsed document; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise ConfigError({"<root>": "config must be a JSON object"})
    errors = {}
    unknown = set(doc) - set(_SECTIONS) - {"seed"}
    for key in sorted(unknown):
        errors[key] = "unknown field"
    sections = {}
    for name, cls in _SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            errors[name] = "must be an object"
            continue
        allowed = {f.name for f in fields(cls)}
        for key in sorted(set(section) - allowed):
            errors[f"{name}.{key}"] = "unknown field"
        sections[name] = cls(**{k: v for k, v in section.items() if k in allowed})
    if errors:
        raise ConfigError(errors)
    cfg = PipelineConfig(sections["paths"], sections["colorseg"], sections["yield"], doc.get("seed", 0))
    if base_dir is not None:
        for f in fields(Paths):
            value = getattr(cfg.paths, f.name)
            if value is not None:
                setattr(cfg.paths, f.name, str(Path(base_dir) / value))
    return cfg


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError({"--config": f"no such file: {path}"})
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError({"--config": f"invalid JSON: {exc}"}) from None
    return config_from_dict(doc, base_dir=path.parent)
