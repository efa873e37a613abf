"""Run configuration: an INI file with a strict, fully defaulted schema.

Sections and keys mirror the dataclass configs of the modules::

    [run]       seed, output_dir, cache_dir
    [world]     WorldConfig fields
    [encoder]   EncoderConfig fields
    [pretrain]  PretrainConfig fields except ``seed``
    [protocol]  methods, seeds, trials, n_per_domain, train_fraction, test_batch, step_choices

Every seed used anywhere is derived from ``[run] seed``; the per-module
seed fields are not settable. An empty file gives the reference config.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .benchharness import METHODS, N_CTX, ProtocolConfig
from .clipcore import EncoderConfig, PretrainConfig
from .errors import ConfigError
from .worldgen import WorldConfig

DERIVED = {"pretrain": ("seed",), "protocol": ("hparam_seed", "data_seed")}


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    seed: int = 0
    output_dir: str = "runs/reference"
    cache_dir: str = ""  # empty means <output_dir>/cache

    def __post_init__(self):
        # single global seed: overwrite whatever the sections carried
        object.__setattr__(self, "pretrain", dataclasses.replace(self.pretrain, seed=self.seed))
        object.__setattr__(
            self, "protocol", dataclasses.replace(self.protocol, hparam_seed=self.seed, data_seed=self.seed)
        )

    def pretrain_fingerprint(self) -> str:
        """Identity of everything that determines the pretrained encoders."""
        return _hash({"world": dataclasses.asdict(self.world), "encoder": dataclasses.asdict(self.encoder),
                      "pretrain": dataclasses.asdict(self.pretrain), "seed": self.seed})

    def fingerprint(self) -> str:
        """Identity of everything that determines benchmark results (paths excluded)."""
        return _hash({"pretrain": self.pretrain_fingerprint(), "protocol": dataclasses.asdict(self.protocol)})


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# schema
# --------------------------------------------------------------------------

_SECTIONS = {"world": WorldConfig, "encoder": EncoderConfig, "pretrain": PretrainConfig, "protocol": ProtocolConfig}
_RUN_KEYS = {"seed": int, "output_dir": str, "cache_dir": str}

# (lower, upper) inclusive bounds; None means unbounded on that side
_RANGES = {
    ("world", "num_classes"): (2, None),
    ("world", "input_dim"): (2, None),
    ("world", "num_pretrain_domains"): (0, None),
    ("world", "num_benchmark_domains"): (0, None),
    ("world", "class_separation"): (1e-12, None),
    ("world", "noise_sigma"): (0.0, None),
    ("world", "pretrain_rotation"): (0.0, None),
    ("world", "benchmark_rotation"): (0.0, None),
    ("world", "style_rank"): (0, None),
    ("world", "max_vocab"): (1, None),
    ("encoder", "emb_dim"): (1, None),
    ("encoder", "tok_dim"): (1, None),
    ("encoder", "hidden"): (1, None),
    ("encoder", "max_len"): (5, None),
    ("pretrain", "steps"): (0, None),
    ("pretrain", "batch_size"): (2, None),
    ("pretrain", "tau"): (1e-12, None),
    ("pretrain", "lr"): (1e-12, None),
    ("pretrain", "momentum"): (0.0, 0.999999),
    ("pretrain", "n_per_domain"): (1, None),
    ("pretrain", "domain_token_prob"): (0.0, 1.0),
    ("protocol", "trials"): (1, None),
    ("protocol", "n_per_domain"): (2, None),
    ("protocol", "train_fraction"): (1e-12, 1 - 1e-12),
    ("protocol", "test_batch"): (1, None),
}


def _field_types(section: str) -> dict[str, type]:
    if section == "run":
        return dict(_RUN_KEYS)
    skip = DERIVED.get(section, ())
    defaults = _SECTIONS[section]()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(_SECTIONS[section]) if f.name not in skip}


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Map (section, key) to its 1-based line for error messages."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip().lower()
            out[(section, "")] = i
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = re.split(r"[=:]", s, 1)[0].strip().lower()
            out.setdefault((section, key), i)
    return out


def _convert(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is tuple:
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from None


def _check_range(section, key, value, where):
    lo, hi = _RANGES.get((section, key), (None, None))
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        raise ConfigError(f"{where}: {key} = {value!r} out of range [{lo}, {hi}]")


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: key outside of any [section]") from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as exc:
        raise ConfigError(f"{source}:{exc.lineno}: {exc.message.splitlines()[0]}") from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"{source}:{lineno}: malformed line {line.strip()!r}") from None
    lines = _key_lines(text)
    known = ("run",) + tuple(_SECTIONS)
    values: dict[str, dict] = {s: {} for s in known}
    for section in parser.sections():
        where = f"{source}:{lines.get((section.lower(), ''), '?')}"
        if section not in known:
            raise ConfigError(f"{where}: unknown section [{section}]")
        types = _field_types(section)
        for key, raw in parser.items(section):
            where = f"{source}:{lines.get((section, key), '?')}"
            if key not in types:
                hint = " (derived from [run] seed)" if key in DERIVED.get(section, ()) else ""
                raise ConfigError(f"{where}: unknown key {key!r} in [{section}]{hint}")
            value = _convert(raw, types[key], where)
            if section == "protocol" and key in ("seeds", "step_choices"):
                value = tuple(_convert(v, int, where) for v in value)
                if not value:
                    raise ConfigError(f"{where}: {key} must not be empty")
                if key == "step_choices" and min(value) < 0:
                    raise ConfigError(f"{where}: step_choices must be >= 0")
            elif section == "protocol" and key == "methods":
                bad = [m for m in value if m not in METHODS]
                if bad or not value:
                    raise ConfigError(f"{where}: unknown method(s) {bad}; known: {', '.join(METHODS)}")
                if len(set(value)) != len(value):
                    raise ConfigError(f"{where}: duplicate methods")
            elif types[key] in (int, float):
                _check_range(section, key, value, where)
            values[section][key] = value
    run = values.pop("run")
    cfg = RunConfig(**{s: _SECTIONS[s](**v) for s, v in values.items()}, **run)
    if {"coop", "dpl"} & set(cfg.protocol.methods) and cfg.encoder.max_len < max(N_CTX) + 1:
        where = f"{source}:{lines.get(('encoder', 'max_len'), '?')}"
        raise ConfigError(f"{where}: max_len must be >= {max(N_CTX) + 1} for prompt methods")
    _check_paths(cfg, source)
    return cfg


def _check_paths(cfg: RunConfig, source: str) -> None:
    for p in (Path(cfg.output_dir), Path(cfg.cache_dir or cfg.output_dir)):
        anc = p
        while not anc.exists() and anc != anc.parent:
            anc = anc.parent
        if anc.exists() and not anc.is_dir():
            raise ConfigError(f"{source}: path {p} is not creatable ({anc} is a file)")


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), str(path))


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """Every key written explicitly; ``parse_config_text(dump_config(c)) == c``."""
    out = ["[run]"]
    out += [f"{k} = {_fmt(getattr(cfg, k))}" for k in _RUN_KEYS]
    for section in _SECTIONS:
        out += ["", f"[{section}]"]
        obj = getattr(cfg, section)
        out += [f"{k} = {_fmt(getattr(obj, k))}" for k in _field_types(section)]
    return "\n".join(out) + "\n"
