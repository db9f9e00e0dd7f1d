"""
Run configuration for visilift.

Settings are layered, lowest precedence first:
1. dataclass defaults
2. a JSON config file (flat keys, relative paths resolved against the file)
3. environment variables, optionally from a .env file
4. explicit overrides (CLI flags)

Environment Variables (all optional):
- VISILIFT_TAU_VIEW: mass-coverage fraction of the visibility gate
- VISILIFT_TAU_ABS: absolute weight floor of the gate
- VISILIFT_GATE_Q: quantile parameter of the gate
- VISILIFT_AGGREGATOR: cosine-median | weighted-mean | l1-median
- VISILIFT_GATING_ENABLED: true/false
- VISILIFT_WORKERS: views (or label chunks) processed in parallel
- VISILIFT_SEED: 64-bit seed for corruption and synthetic data
- VISILIFT_LOG_LEVEL: DEBUG, INFO, WARNING, ...
- VISILIFT_WEISZFELD_ITERS / VISILIFT_WEISZFELD_EPS
- VISILIFT_TAU_RADIUS / VISILIFT_K_FALLBACK / VISILIFT_CHUNK_SIZE
- VISILIFT_TAU_MIN
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

from visilift.errors import ConfigError

AGGREGATORS = ("cosine-median", "weighted-mean", "l1-median")
ENV_PREFIX = "VISILIFT_"


@dataclass(frozen=True)
class GateConfig:
    tau_view: float = 0.6
    tau_abs: float = 1e-4
    q: float = 0.1
    use_mass_stage: bool = True
    use_quantile_stage: bool = True

    def __post_init__(self):
        if not 0.0 < self.tau_view <= 1.0:
            raise ConfigError(f"tau_view must lie in (0, 1], got {self.tau_view}")
        if not 0.5 <= self.tau_view <= 0.75:
            logging.warning(f"tau_view={self.tau_view} is outside the recommended range [0.5, 0.75]")
        if self.tau_abs < 0.0:
            raise ConfigError(f"tau_abs must be >= 0, got {self.tau_abs}")
        if not 0.0 < self.q < 1.0:
            raise ConfigError(f"gate q must lie in (0, 1), got {self.q}")


@dataclass(frozen=True)
class LabelConfig:
    tau_radius: float = 3.0
    k_fallback: int = 8
    chunk_size: int = 4096

    def __post_init__(self):
        if self.tau_radius <= 0.0:
            raise ConfigError(f"tau_radius must be > 0, got {self.tau_radius}")
        if self.k_fallback < 1:
            raise ConfigError(f"k_fallback must be >= 1, got {self.k_fallback}")
        if self.chunk_size < 1:
            raise ConfigError(f"chunk_size must be >= 1, got {self.chunk_size}")


@dataclass(frozen=True)
class EvalConfig:
    select_threshold: float = 0.6
    render_threshold: float = 0.5
    relevancy_threshold_2d: float = 0.5
    tau_min: int = 64
    corrupt_radius: int = 10

    def __post_init__(self):
        if self.tau_min < 0:
            raise ConfigError(f"tau_min must be >= 0, got {self.tau_min}")
        if self.corrupt_radius < 1:
            raise ConfigError(f"corrupt radius must be >= 1, got {self.corrupt_radius}")


@dataclass(frozen=True)
class PipelineConfig:
    scene: Optional[str] = None
    cameras: Optional[str] = None
    feature_maps: Tuple[str, ...] = ()
    output: Optional[str] = None
    summary: Optional[str] = None
    aggregator: str = "cosine-median"
    gating_enabled: bool = True
    gate: GateConfig = field(default_factory=GateConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    weiszfeld_iters: int = 500
    weiszfeld_eps: float = 1e-10
    workers: int = 4
    epochs: int = 1
    seed: int = 0
    log_level: str = "INFO"

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"Unknown aggregator '{self.aggregator}', expected one of {', '.join(AGGREGATORS)}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.weiszfeld_iters < 1 or self.weiszfeld_eps <= 0.0:
            raise ConfigError("Weiszfeld iterations must be >= 1 and eps > 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def require_inputs(self):
        """Check that the lift inputs are configured and exist on disk"""
        if not all([self.scene, self.cameras, self.feature_maps]):
            raise ConfigError("Missing required inputs: scene, cameras and feature_maps must all be set")
        for path in (self.scene, self.cameras, *self.feature_maps):
            if not Path(path).is_file():
                raise ConfigError(f"Referenced file does not exist: {path}")


def _parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


# flat key -> (section, attribute, parser)
_KEYS: Dict[str, Tuple[Optional[str], str, Any]] = {
    "scene": (None, "scene", str),
    "cameras": (None, "cameras", str),
    "feature_maps": (None, "feature_maps", None),
    "output": (None, "output", str),
    "summary": (None, "summary", str),
    "aggregator": (None, "aggregator", str),
    "gating_enabled": (None, "gating_enabled", _parse_bool),
    "weiszfeld_iters": (None, "weiszfeld_iters", int),
    "weiszfeld_eps": (None, "weiszfeld_eps", float),
    "workers": (None, "workers", int),
    "epochs": (None, "epochs", int),
    "seed": (None, "seed", int),
    "log_level": (None, "log_level", str),
    "tau_view": ("gate", "tau_view", float),
    "tau_abs": ("gate", "tau_abs", float),
    "gate_q": ("gate", "q", float),
    "use_mass_stage": ("gate", "use_mass_stage", _parse_bool),
    "use_quantile_stage": ("gate", "use_quantile_stage", _parse_bool),
    "tau_radius": ("label", "tau_radius", float),
    "k_fallback": ("label", "k_fallback", int),
    "chunk_size": ("label", "chunk_size", int),
    "select_threshold": ("eval", "select_threshold", float),
    "render_threshold": ("eval", "render_threshold", float),
    "relevancy_threshold_2d": ("eval", "relevancy_threshold_2d", float),
    "tau_min": ("eval", "tau_min", int),
    "corrupt_radius": ("eval", "corrupt_radius", int),
}

_PATH_KEYS = ("scene", "cameras", "output", "summary")


def _resolve_feature_maps(value: Any, base: Optional[Path]) -> Tuple[str, ...]:
    """Feature maps are a list of files or a directory (ascending file order)"""
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()] if "," in value else [value]
    elif isinstance(value, (list, tuple)):
        parts = [str(p) for p in value]
    else:
        raise ConfigError(f"feature_maps must be a list of paths or a directory, got {type(value).__name__}")

    resolved: List[str] = []
    for part in parts:
        path = Path(part)
        if base is not None and not path.is_absolute():
            path = base / path
        if path.is_dir():
            resolved.extend(str(p) for p in sorted(path.glob("*.vfmp")))
        else:
            resolved.append(str(path))
    return tuple(resolved)


def _apply(values: Dict[str, Dict[str, Any]], key: str, raw: Any, base: Optional[Path], source: str):
    if key not in _KEYS:
        raise ConfigError(f"Unknown configuration key '{key}' in {source}")
    section, attribute, parser = _KEYS[key]
    try:
        if key == "feature_maps":
            value = _resolve_feature_maps(raw, base)
        elif raw is None:
            value = None
        else:
            value = parser(raw)
            if key in _PATH_KEYS and base is not None and not Path(value).is_absolute():
                value = str(base / value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value for '{key}' in {source}: {e}") from e
    values[section or "pipeline"][attribute] = value


def _read_config_file(path: str) -> Mapping[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")

    # nested {"gate": {...}} sections are accepted next to flat keys
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        if key in ("gate", "label", "eval") and isinstance(value, dict):
            for inner, inner_value in value.items():
                flat["gate_q" if (key == "gate" and inner == "q") else inner] = inner_value
        else:
            flat[key] = value
    return flat


def load_config(path: Optional[str] = None,
                overrides: Optional[Mapping[str, Any]] = None,
                environ: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    """
    Build a PipelineConfig from defaults, a JSON file, the environment and overrides.

    Args:
        path: optional JSON config file
        overrides: flat keys (CLI flags); None values are ignored
        environ: environment mapping, defaults to os.environ after load_dotenv()

    Raises:
        ConfigError: unknown keys, unparsable or out-of-range values
    """
    values: Dict[str, Dict[str, Any]] = {"pipeline": {}, "gate": {}, "label": {}, "eval": {}}

    if path:
        base = Path(path).resolve().parent
        for key, raw in _read_config_file(path).items():
            _apply(values, key, raw, base, f"config file {path}")

    if environ is None:
        load_dotenv()
        environ = os.environ
    for key in _KEYS:
        env_name = ENV_PREFIX + key.upper()
        if env_name in environ:
            _apply(values, key, environ[env_name], None, f"environment variable {env_name}")

    for key, raw in (overrides or {}).items():
        if raw is not None:
            _apply(values, key, raw, None, "command-line flags")

    try:
        return PipelineConfig(
            gate=GateConfig(**values["gate"]),
            label=LabelConfig(**values["label"]),
            eval=EvalConfig(**values["eval"]),
            **values["pipeline"],
        )
    except TypeError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def with_overrides(config: PipelineConfig, **overrides: Any) -> PipelineConfig:
    """Return a copy of config with flat keys replaced (used by ablation cells)"""
    sections = {"gate": {}, "label": {}, "eval": {}}
    top: Dict[str, Any] = {}
    for key, value in overrides.items():
        if key not in _KEYS:
            raise ConfigError(f"Unknown configuration key '{key}'")
        section, attribute, _ = _KEYS[key]
        if section is None:
            top[attribute] = value
        else:
            sections[section][attribute] = value
    for section, changes in sections.items():
        if changes:
            top[section] = replace(getattr(config, section), **changes)
    return replace(config, **top)


def config_to_dict(config: PipelineConfig) -> Dict[str, Any]:
    """Flatten a config back into its JSON keys"""
    out: Dict[str, Any] = {}
    for key, (section, attribute, _) in _KEYS.items():
        holder = config if section is None else getattr(config, section)
        value = getattr(holder, attribute)
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def configure_logging(level: str = "INFO"):
    """Configure root logging with the project-wide format"""
    numeric = logging.getLevelName(str(level).upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"Unknown log level '{level}'")
    logging.basicConfig(
        level=numeric,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    logging.getLogger().setLevel(numeric)


def keyed_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by (seed, entity index)"""
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


__all__ = [
    "AGGREGATORS", "GateConfig", "LabelConfig", "EvalConfig", "PipelineConfig",
    "load_config", "with_overrides", "config_to_dict", "configure_logging", "keyed_rng",
]