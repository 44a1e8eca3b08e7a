"""Experiment configuration: ``key = value`` lines under named sections.

::

    [env]
    name = chain
    n = 40

    [model]
    latent_dim = 8
    hidden = 64, 64

    [algo]
    algorithm = bdpg
    gamma = 0.99
    seed = 1

    [io]
    outdir = runs
    checkpoint_every = 10

Keys under ``[env]`` other than ``name`` are constructor arguments of the
environment. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import inspect
import os
import re
from dataclasses import dataclass, field

from .envs import ENVS
from .trainer import AlgoConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelBlock:
    latent_dim: int = 8
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.latent_dim < 1 or not self.hidden or min(self.hidden) < 1:
            raise ValueError("latent_dim and hidden sizes must be positive")


@dataclass
class IOBlock:
    outdir: str = "runs"
    checkpoint_every: int = 0  # updates; 0 keeps only the final checkpoint
    record_wall_time: bool = True

    def __post_init__(self):
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be nonnegative")


@dataclass
class ExperimentConfig:
    env_name: str = "chain"
    env_params: dict = field(default_factory=dict)
    model: ModelBlock = field(default_factory=ModelBlock)
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    io: IOBlock = field(default_factory=IOBlock)

    def make_env(self):
        return ENVS[self.env_name](**self.env_params)

    def to_text(self) -> str:
        lines = ["[env]", f"name = {self.env_name}"]
        lines += [f"{k} = {_fmt(v)}" for k, v in self.env_params.items()]
        for title, block in (("model", self.model), ("algo", self.algo), ("io", self.io)):
            lines += ["", f"[{title}]"]
            lines += [f"{f.name} = {_fmt(getattr(block, f.name))}"
                      for f in dataclasses.fields(block)]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(raw: str, kind, where: str):
    try:
        if kind is bool or isinstance(kind, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or isinstance(kind, int):
            return int(raw)
        if kind is float or isinstance(kind, float):
            return float(raw)
        if kind is tuple or isinstance(kind, tuple):
            return tuple(int(p) for p in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


_FIELD_KINDS = {"int": int, "float": float, "str": str, "bool": bool,
                "tuple[int, ...]": tuple, "int | None": int, "float | None": float}


def _block_from(section: dict[str, tuple[str, int]], cls, label: str, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, (raw, line) in section.items():
        if key not in fields:
            raise ConfigError(f"{path}:{line}: unknown key {key!r} in [{label}]")
        kind = _FIELD_KINDS.get(str(fields[key].type), str)
        kwargs[key] = _convert(raw, kind, f"{path}:{line}: [{label}] {key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        first = min((ln for _, ln in section.values()), default=0)
        raise ConfigError(f"{path}:{first}: [{label}] {exc}") from None


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    out = {}
    section = None
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"\[(.+)\]$", stripped)
        if m:
            section = m.group(1).strip()
            out[(section, "")] = i
        elif section and re.match(r"[^#;].*=", stripped):
            out[(section, stripped.split("=", 1)[0].strip().lower())] = i
    return out


def parse_config(text: str, path: str = "<config>",
                 overrides: dict[str, str] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#", ";"), default_section="__none__")
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    lines = _line_numbers(text)
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    for name in parser.sections():
        if name not in ("env", "model", "algo", "io"):
            raise ConfigError(f"{path}:{lines.get((name, ''), 0)}: unknown section [{name}]")
        sections[name] = {k: (v, lines.get((name, k), 0)) for k, v in parser.items(name)}
    for dotted, raw in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r}: expected section.key")
        sec, key = dotted.split(".", 1)
        sections.setdefault(sec, {})[key] = (raw, 0)
    if "seed" not in sections.get("algo", {}) and os.environ.get("BDPG_SEED"):
        sections.setdefault("algo", {})["seed"] = (os.environ["BDPG_SEED"], 0)

    env = dict(sections.get("env", {}))
    name_raw, name_line = env.pop("name", ("chain", 0))
    if name_raw not in ENVS:
        raise ConfigError(f"{path}:{name_line}: unknown env {name_raw!r}; "
                          f"choose from {sorted(ENVS)}")
    sig = inspect.signature(ENVS[name_raw].__init__)
    env_params = {}
    for key, (raw, line) in env.items():
        if key not in sig.parameters or key == "self":
            raise ConfigError(f"{path}:{line}: unknown key {key!r} for env {name_raw!r}")
        default = sig.parameters[key].default
        kind = type(default) if default not in (None, inspect.Parameter.empty) else int
        env_params[key] = _convert(raw, kind, f"{path}:{line}: [env] {key}")
    try:
        ENVS[name_raw](**env_params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}:{name_line}: [env] {exc}") from None

    return ExperimentConfig(
        env_name=name_raw,
        env_params=env_params,
        model=_block_from(sections.get("model", {}), ModelBlock, "model", path),
        algo=_block_from(sections.get("algo", {}), AlgoConfig, "algo", path),
        io=_block_from(sections.get("io", {}), IOBlock, "io", path),
    )


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path), overrides)
