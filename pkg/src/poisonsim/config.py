"""Experiment configuration: a dataclass tree plus a dotted-key text format.

Config files are plain text, one ``section.key = value`` assignment per line,
with ``#`` comments and blank lines ignored. Every key must name an existing
field; unknown or duplicate keys are errors so a stale config file fails
loudly instead of silently running with defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .attack import AttackConfig, GenerationConfig
from .features import PopulationConfig

__all__ = [
    "ConfigError",
    "ExtractorConfig",
    "SweepConfig",
    "DetectionSetup",
    "ExperimentConfig",
    "default_config",
    "parse_config",
    "load_config",
    "config_to_text",
    "config_to_dict",
    "config_from_dict",
]


class ConfigError(ValueError):
    """Malformed config text, unknown keys, or invalid field values."""


@dataclass(frozen=True)
class ExtractorConfig:
    """Architecture of the synthetic feature extractor."""

    d_emb: int = 16
    hidden: tuple[int, ...] = (48, 32)
    l2_normalize: bool = True

    def __post_init__(self):
        if self.d_emb < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")


@dataclass(frozen=True)
class SweepConfig:
    """User-pool layout and pair-sweep sizing.

    The first n_calibration users (in id order) calibrate thresholds, the
    next n_attackers and n_victims form the disjoint attack pools. Heuristic
    fitting pairs attackers with calibration users so its victims never
    overlap the attack-phase victims.

    mask_fraction sizes the contiguous editable block used for attack
    generation. It must give the perturbation at least d_emb degrees of
    freedom (or the block cannot steer the embedding onto an arbitrary
    target) while leaving enough coordinates untouched that the batch
    members remain distinct samples of the attacker.

    surrogate_rel_scale is the relative weight-noise applied to the real
    extractor to build the transfer attacker's surrogate. At 0.6 the two
    models agree on coarse identity structure but disagree on decision
    boundaries, which reproduces an order-of-magnitude drop in transfer
    success.
    """

    n_calibration: int = 10
    n_attackers: int = 10
    n_victims: int = 10
    n_pairs: int = 100
    heuristic_pairs: int = 10
    batch_size: int = 12
    mask_fraction: float = 0.5
    surrogate_rel_scale: float = 0.6

    def __post_init__(self):
        counts = (self.n_calibration, self.n_attackers, self.n_victims,
                  self.n_pairs, self.heuristic_pairs, self.batch_size)
        if any(c < 1 for c in counts):
            raise ValueError("pool and sweep sizes must be positive")
        if self.n_pairs > self.n_attackers * self.n_victims:
            raise ValueError("n_pairs exceeds the attacker x victim grid")
        if not 0.0 < self.mask_fraction <= 1.0:
            raise ValueError("mask_fraction must lie in (0, 1]")
        if self.surrogate_rel_scale < 0:
            raise ValueError("surrogate_rel_scale must be >= 0")


@dataclass(frozen=True)
class DetectionSetup:
    """Detection-stage sizing: alarm run length, windows, and sequence counts."""

    consecutive_flags_to_alarm: int = 1
    window: int = 4
    radius_percentile: float = 95.0
    sequences_per_factor: int = 25
    sequence_length: int = 12

    def __post_init__(self):
        if self.consecutive_flags_to_alarm < 1 or self.window < 1:
            raise ValueError("alarm run length and window must be >= 1")
        if not 0.0 < self.radius_percentile <= 100.0:
            raise ValueError("radius_percentile must lie in (0, 100]")
        if self.sequences_per_factor < 1 or self.sequence_length < 2:
            raise ValueError("need >= 1 sequences of length >= 2 per factor")


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete experiment description; the manifest echoes every field."""

    seed: int = 7
    population: PopulationConfig = PopulationConfig()
    extractor: ExtractorConfig = ExtractorConfig()
    generation: GenerationConfig = GenerationConfig()
    attack: AttackConfig = AttackConfig()
    sweep: SweepConfig = SweepConfig()
    detection: DetectionSetup = DetectionSetup()

    def __post_init__(self):
        needed = (self.sweep.n_calibration + self.sweep.n_attackers
                  + self.sweep.n_victims)
        if needed > self.population.n_users:
            raise ValueError(
                f"pools need {needed} users but the population has "
                f"{self.population.n_users}; pools must not overlap")


_SECTIONS = {
    "population": PopulationConfig,
    "extractor": ExtractorConfig,
    "generation": GenerationConfig,
    "attack": AttackConfig,
    "sweep": SweepConfig,
    "detection": DetectionSetup,
}

# Fields whose default is None, so the element type cannot be inferred from it.
_NONE_FIELD_TYPES = {
    ("generation", "selection_beta"): float,
    ("attack", "fallback_step"): int,
}


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def _known_keys() -> list[str]:
    keys = ["seed"]
    for section, cls in _SECTIONS.items():
        keys.extend(f"{section}.{f.name}" for f in fields(cls))
    return keys


def _coerce_scalar(value: str, target: type, key: str):
    if target is bool:
        low = value.lower()
        if low in ("true", "false"):
            return low == "true"
        raise ConfigError(f"{key}: expected true or false, got {value!r}")
    try:
        return target(value)
    except ValueError:
        raise ConfigError(
            f"{key}: expected {target.__name__}, got {value!r}") from None


def _coerce(value: str, default, section: str, name: str):
    key = f"{section}.{name}" if section else name
    if default is None:
        if value.lower() == "none":
            return None
        return _coerce_scalar(value, _NONE_FIELD_TYPES[(section, name)], key)
    if isinstance(default, tuple):
        elem_type = type(default[0])
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"{key}: expected a comma-separated list")
        return tuple(_coerce_scalar(p, elem_type, key) for p in parts)
    if isinstance(default, bool):
        return _coerce_scalar(value, bool, key)
    return _coerce_scalar(value, type(default), key)


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse dotted-key assignments and apply them over the defaults.

    All problems (syntax, unknown keys, duplicates, bad values) are gathered
    and reported together in one error.
    """
    base = base if base is not None else default_config()
    assignments: dict[str, str] = {}
    problems: list[str] = []
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            problems.append(f"line {lineno}: expected 'key = value', got {line!r}")
            continue
        if key in assignments:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        assignments[key] = value

    field_defaults = {
        section: {f.name: f.default for f in fields(cls)}
        for section, cls in _SECTIONS.items()
    }
    unknown = []
    section_updates: dict[str, dict] = {s: {} for s in _SECTIONS}
    top_updates: dict[str, object] = {}
    for key, value in assignments.items():
        if key == "seed":
            try:
                top_updates["seed"] = _coerce_scalar(value, int, key)
            except ConfigError as exc:
                problems.append(str(exc))
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or name not in field_defaults.get(section, {}):
            unknown.append(key)
            continue
        try:
            section_updates[section][name] = _coerce(
                value, field_defaults[section][name], section, name)
        except ConfigError as exc:
            problems.append(str(exc))
    if unknown:
        known = ", ".join(_known_keys())
        problems.append(
            "unknown config keys: " + ", ".join(sorted(unknown))
            + f" (known keys: {known})")
    if problems:
        raise ConfigError("; ".join(problems))

    kwargs: dict[str, object] = dict(top_updates)
    for section, updates in section_updates.items():
        if updates:
            try:
                kwargs[section] = replace(getattr(base, section), **updates)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{section}: {exc}") from exc
    try:
        return replace(base, **kwargs) if kwargs else base
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _value_to_text(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_value_to_text(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg: ExperimentConfig) -> str:
    """Render a config as dotted-key text that parse_config reads back."""
    lines = [f"seed = {cfg.seed}"]
    for section, cls in _SECTIONS.items():
        section_cfg = getattr(cfg, section)
        for f in fields(cls):
            lines.append(
                f"{section}.{f.name} = {_value_to_text(getattr(section_cfg, f.name))}")
    return "\n".join(lines) + "\n"


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Nested plain-Python dict (tuples become lists), for the manifest."""
    out: dict = {"seed": cfg.seed}
    for section, cls in _SECTIONS.items():
        section_cfg = getattr(cfg, section)
        block = {}
        for f in fields(cls):
            value = getattr(section_cfg, f.name)
            block[f.name] = list(value) if isinstance(value, tuple) else value
        out[section] = block
    return out


def config_from_dict(data: dict) -> ExperimentConfig:
    """Rebuild a config from a manifest echo; unknown keys are errors."""
    unknown = [k for k in data if k != "seed" and k not in _SECTIONS]
    kwargs: dict[str, object] = {}
    if "seed" in data:
        kwargs["seed"] = int(data["seed"])
    for section, cls in _SECTIONS.items():
        if section not in data:
            continue
        block = data[section]
        names = {f.name: f.default for f in fields(cls)}
        unknown.extend(f"{section}.{k}" for k in block if k not in names)
        values = {}
        for name, value in block.items():
            if name not in names:
                continue
            if isinstance(value, list):
                default = names[name]
                elem = type(default[0]) if isinstance(default, tuple) and default \
                    else float
                value = tuple(elem(v) for v in value)
            values[name] = value
        try:
            kwargs[section] = cls(**values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{section}: {exc}") from exc
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    try:
        return ExperimentConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
