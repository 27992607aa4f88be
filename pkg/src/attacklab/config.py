"""Run configuration: TOML file format, defaults, and precedence.

Every field has a default; an empty config file (or none at all) yields
the toy-default run. Precedence is command-line flag > config file >
default. The snapshot written into each run directory reparses to an
identical configuration.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attack import AttackConfig
from .encoders import ProjectorArch, TextArch, VisionArch
from .errors import ConfigError


@dataclass(frozen=True)
class AttackSection:
    epsilon: float = 8.0        # L-inf budget, 1/255 units
    eta: float = 1.0            # step size, 1/255 units
    iterations: int = 100
    n_instructions: int = 10
    seed: int = 0
    loss_mode: str = "instructta"
    mf_weight: float = 1.0
    record_trace: bool = True
    pair_samples: int = 1
    mftt_queries: int = 8
    mftt_sigma: float = 2.0


@dataclass(frozen=True)
class ModelsSection:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    attn_sharpness: float = 8.0
    queries: int = 8
    instruction_gain: float = 0.25
    vocab: int = 1024
    max_text_len: int = 32
    share_vision_encoder: bool = True


@dataclass(frozen=True)
class ProvidersSection:
    instruction_mode: str = "offline"   # offline | remote
    judge_mode: str = "offline"         # offline | remote
    judge_tau: float = 0.8
    endpoint: str = ""
    model: str = ""
    timeout: float = 30.0
    retries: int = 2
    strict_parsing: bool = False
    api_key_env: str = "ATTACKLAB_LLM_KEY"


@dataclass(frozen=True)
class DataSection:
    gallery_manifest: str = ""     # empty -> bundled gallery
    caption_bank: str = ""         # empty -> bundled captions
    instruction_library: str = ""  # empty -> bundled instruction list
    sample_count: int = 50


@dataclass(frozen=True)
class OutputSection:
    run_dir: str = "run"
    write_images: bool = True
    write_traces: bool = True
    workers: int = 1


_SECTIONS = {
    "attack": AttackSection,
    "models": ModelsSection,
    "providers": ProvidersSection,
    "data": DataSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class RunConfig:
    attack: AttackSection = field(default_factory=AttackSection)
    models: ModelsSection = field(default_factory=ModelsSection)
    providers: ProvidersSection = field(default_factory=ProvidersSection)
    data: DataSection = field(default_factory=DataSection)
    output: OutputSection = field(default_factory=OutputSection)

    def attack_config(self) -> AttackConfig:
        a = self.attack
        return AttackConfig(
            epsilon=a.epsilon, eta=a.eta, iterations=a.iterations,
            n_instructions=a.n_instructions, seed=a.seed,
            loss_mode=a.loss_mode, mf_weight=a.mf_weight,
            record_trace=a.record_trace, pair_samples=a.pair_samples,
            mftt_queries=a.mftt_queries, mftt_sigma=a.mftt_sigma)

    def vision_arch(self) -> VisionArch:
        m = self.models
        return VisionArch(image_size=m.image_size, patch_size=m.patch_size,
                          dim=m.embed_dim, depth=m.depth, heads=m.heads,
                          mlp_ratio=m.mlp_ratio,
                          attn_sharpness=m.attn_sharpness)

    def text_arch(self) -> TextArch:
        m = self.models
        return TextArch(vocab=m.vocab, dim=m.embed_dim, heads=m.heads,
                        max_len=m.max_text_len,
                        attn_sharpness=m.attn_sharpness)

    def projector_arch(self) -> ProjectorArch:
        m = self.models
        return ProjectorArch(queries=m.queries, dim=m.embed_dim,
                             heads=m.heads, attn_sharpness=m.attn_sharpness,
                             instruction_gain=m.instruction_gain)


def _coerce(section: str, key: str, default, value):
    ok = isinstance(value, bool) if isinstance(default, bool) else (
        isinstance(value, (int, float)) and not isinstance(value, bool)
        if isinstance(default, float) else
        isinstance(value, int) and not isinstance(value, bool)
        if isinstance(default, int) else isinstance(value, str))
    if not ok:
        raise ConfigError(
            f"config key {section}.{key} expects "
            f"{type(default).__name__}, got {value!r}")
    return float(value) if isinstance(default, float) else value


def config_from_dict(raw: dict) -> RunConfig:
    sections = {}
    for name, value in raw.items():
        cls = _SECTIONS.get(name)
        if cls is None:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(value, dict):
            raise ConfigError(f"config section [{name}] must be a table")
        defaults = cls()
        known = {f.name: getattr(defaults, f.name) for f in fields(cls)}
        kwargs = {}
        for key, val in value.items():
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}")
            kwargs[key] = _coerce(name, key, known[key], val)
        sections[name] = cls(**kwargs)
    return RunConfig(**sections)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from exc
    return config_from_dict(raw)


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Apply flat dotted-key overrides (e.g. {'attack.epsilon': 4.0})."""
    per_section: dict[str, dict] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        per_section.setdefault(section, {})[key] = value
    out = config
    for section, kv in per_section.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        current = getattr(out, section)
        for key in kv:
            if not hasattr(current, key):
                raise ConfigError(f"unknown config key {section}.{key}")
        out = replace(out, **{section: replace(current, **kv)})
    return out


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    raise ConfigError(f"cannot serialize config value {value!r}")


def dump_config(config: RunConfig) -> str:
    """Serialize to TOML with fixed section and key order."""
    lines = []
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        for key, value in asdict(getattr(config, name)).items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def write_snapshot(config: RunConfig, path) -> None:
    Path(path).write_text(dump_config(config), encoding="utf-8")
