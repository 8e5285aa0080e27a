"""Plain-text ``key=value`` configuration files.

Grammar: one ``key = value`` per line; ``#`` starts a comment; blank lines
are ignored. Keys are TrainerConfig field names (``seed``, ``pixels_per_frame``,
``pacing``...), ``loss.<field>`` and ``sampling.<field>`` for the nested
configs, ``bound`` / ``bound_max_dist`` for the supervision bound, and the
CLI-level keys listed in ``RUN_KEYS``. Values are parsed with the type of the
field they set. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .geometry import DepthSamplingConfig
from .supervision import BoundMethod, LossConfig
from .trainer import TrainerConfig

RUN_KEYS = {"dataset": str, "checkpoint_dir": str, "eval_points": int, "eval_seed": int}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected key=value, got '{raw.strip()}'")
        k, v = (t.strip() for t in line.split("=", 1))
        if not k:
            raise ConfigError(f"{source}:{ln}: empty key")
        out[k] = v
    return out


def load_config_file(path: str | Path) -> dict[str, str]:
    p = Path(path)
    return parse_config_text(p.read_text(), str(p))


def _convert(value: str, typ, key: str):
    typ = str(typ)
    try:
        if "bool" in typ:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if value.lower() == "none" and "None" in typ:
            return None
        if "int" in typ:
            return int(value)
        if "float" in typ:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse '{value}' as {typ}") from None


def _fields(cls) -> dict[str, object]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def build_trainer_config(values: dict[str, str]) -> tuple[TrainerConfig, dict]:
    """TrainerConfig from string values; returns it with the remaining run-level keys parsed."""
    top, loss, samp, extra = {}, {}, {}, {}
    bound_kind, bound_dist = None, None
    tf, lf, sf = _fields(TrainerConfig), _fields(LossConfig), _fields(DepthSamplingConfig)
    for key, val in values.items():
        if key.startswith("loss."):
            name = key[5:]
            if name not in lf or name == "bound":
                raise ConfigError(f"unknown config key '{key}'")
            loss[name] = _convert(val, lf[name], key)
        elif key.startswith("sampling."):
            name = key[9:]
            if name not in sf:
                raise ConfigError(f"unknown config key '{key}'")
            samp[name] = _convert(val, sf[name], key)
        elif key == "bound":
            bound_kind = val
        elif key == "bound_max_dist":
            bound_dist = _convert(val, "float", key)
        elif key in RUN_KEYS:
            extra[key] = _convert(val, RUN_KEYS[key].__name__, key)
        elif key in tf and key not in ("loss", "sampling"):
            top[key] = _convert(val, tf[key], key)
        else:
            raise ConfigError(f"unknown config key '{key}'")
    try:
        bkw = {}
        if bound_kind is not None:
            bkw["kind"] = bound_kind
        if bound_dist is not None:
            bkw["max_dist"] = bound_dist
        cfg = TrainerConfig(
            **top,
            loss=LossConfig(**loss, bound=BoundMethod(**bkw)),
            sampling=DepthSamplingConfig(**samp),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg, extra


def format_trainer_config(cfg: TrainerConfig) -> str:
    """Inverse of ``build_trainer_config`` (run-level keys excluded)."""
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name in ("loss", "sampling"):
            continue
        lines.append(f"{f.name}={getattr(cfg, f.name)}")
    for f in dataclasses.fields(cfg.loss):
        if f.name != "bound":
            lines.append(f"loss.{f.name}={getattr(cfg.loss, f.name)!r}")
    lines.append(f"bound={cfg.loss.bound.kind.value}")
    lines.append(f"bound_max_dist={cfg.loss.bound.max_dist!r}")
    for f in dataclasses.fields(cfg.sampling):
        lines.append(f"sampling.{f.name}={getattr(cfg.sampling, f.name)!r}")
    return "\n".join(lines) + "\n"
