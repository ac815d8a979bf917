"""Run configuration: INI-style ``key = value`` files with sections.

Sections and keys::

    [data]    source (synthetic|tid2008|index), root, n_refs, size, kinds,
              levels, synth_seed, split_seed, split_ratios, lcn_window, lcn_eps
    [model]   patch, scales, conv_channels, hidden, rnn_hidden, T, t0,
              loc_init_scale, score_bias_init
    [train]   every TrainConfig field (lambda_reg, alpha_rein, epochs, ...)
    [output]  dir

Unknown sections or keys and out-of-range values are rejected with the
offending key and its line number.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .data import SYNTH_KINDS
from .net import ModelConfig
from .train import TrainConfig

SEED_ENV = "GLIMPSE_IQA_SEED"
THREADS_ENV = "GLIMPSE_IQA_THREADS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    root: str | None = None
    n_refs: int = 20
    size: int = 160
    kinds: tuple[str, ...] = SYNTH_KINDS
    levels: tuple[int, ...] = (1, 2, 3, 4)
    synth_seed: int = 0
    split_seed: int = 0
    split_ratios: tuple[float, ...] = (0.6, 0.2, 0.2)
    lcn_window: int = 7
    lcn_eps: float = 1e-4

    def __post_init__(self):
        if self.source not in ("synthetic", "tid2008", "index"):
            raise ValueError(f"source must be synthetic, tid2008 or index, got {self.source!r}")
        if self.source != "synthetic" and not self.root:
            raise ValueError(f"source {self.source!r} needs a root path")
        if self.n_refs < 3 or self.size < 8:
            raise ValueError("n_refs must be >= 3 and size >= 8")
        bad = [k for k in self.kinds if k not in SYNTH_KINDS]
        if bad or not self.kinds:
            raise ValueError(f"unknown kinds {bad}")
        if not self.levels or any(not 1 <= lv <= 4 for lv in self.levels):
            raise ValueError("levels must lie in 1..4")
        if self.lcn_window < 1 or self.lcn_window % 2 == 0 or not self.lcn_eps > 0:
            raise ValueError("lcn_window must be odd and lcn_eps positive")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)  # ModelConfig kwargs except n_classes
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/default"

    def model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(n_classes=n_classes, **self.model)


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"n_classes"}


def _tuple_of(conv):
    def parse(text):
        return tuple(conv(p.strip()) for p in text.split(",") if p.strip())
    return parse


def _optional_float(text):
    return None if text.strip().lower() in ("none", "off", "") else float(text)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_SCALAR = {int: int, float: float, str: str, bool: _bool}


def _converter_for(dc, name):
    ftype = {f.name: f.type for f in dataclasses.fields(dc)}[name]
    if "float | None" in str(ftype):
        return _optional_float
    if "str | None" in str(ftype):
        return lambda t: t.strip() or None
    m = re.match(r"tuple\[(\w+)", str(ftype))
    if m:
        return _tuple_of({"int": int, "float": float, "str": str}[m.group(1)])
    return _SCALAR[{"int": int, "float": float, "str": str, "bool": bool}[str(ftype)]]


def _line_of(text: str, section: str, key: str | None) -> int:
    current = None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return no
        elif current == section and key is not None:
            if re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
                return no
    return 0


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None

    def fail(section, key, msg):
        line = _line_of(text, section, key)
        where = f"{source}:{line}" if line else source
        what = f"[{section}] {key}" if key else f"[{section}]"
        raise ConfigError(f"{where}: {what}: {msg}")

    known = {"data", "model", "train", "output"}
    for section in cp.sections():
        if section not in known:
            fail(section, None, "unknown section")

    def collect(section, dc, allowed):
        values = {}
        if not cp.has_section(section):
            return values
        for key, raw in cp.items(section):
            if key not in allowed:
                fail(section, key, "unknown key")
            try:
                values[key] = _converter_for(dc, key)(raw)
            except (ValueError, KeyError) as exc:
                fail(section, key, f"bad value {raw!r} ({exc})")
        return values

    data_vals = collect("data", DataConfig, {f.name for f in dataclasses.fields(DataConfig)})
    model_vals = collect("model", ModelConfig, _MODEL_KEYS)
    train_vals = collect("train", TrainConfig, {f.name for f in dataclasses.fields(TrainConfig)})
    out_dir = "runs/default"
    if cp.has_section("output"):
        for key, raw in cp.items("output"):
            if key != "dir":
                fail("output", key, "unknown key")
            out_dir = raw.strip()

    def build(section, factory, vals):
        try:
            return factory(**vals)
        except (ValueError, TypeError) as exc:
            key = next((k for k in vals if k in str(exc)), None)
            fail(section, key, str(exc))

    data = build("data", DataConfig, data_vals)
    build("model", lambda **kw: ModelConfig(n_classes=1, **kw), model_vals)
    train = build("train", TrainConfig, train_vals)
    return RunConfig(data=data, model=model_vals, train=train, out_dir=out_dir)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    cfg = parse_config(path.read_text(), str(path))
    if cfg.data.root and not Path(cfg.data.root).is_absolute():
        # relative dataset roots are relative to the config file, not the cwd
        root = str(path.parent / cfg.data.root)
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, root=root))
    return apply_env(cfg)


def apply_env(cfg: RunConfig) -> RunConfig:
    seed = os.environ.get(SEED_ENV)
    if seed is None:
        return cfg
    try:
        value = int(seed)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from None
    return with_seed(cfg, value)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))


def dump_config(cfg: RunConfig) -> str:
    """Serialise back to the INI format; ``parse_config(dump_config(c)) == c``."""

    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        if v is None:
            return "none"
        return repr(v) if isinstance(v, float) else str(v)

    lines = ["[data]"]
    for f in dataclasses.fields(DataConfig):
        v = getattr(cfg.data, f.name)
        if v is not None:
            lines.append(f"{f.name} = {fmt(v)}")
    lines.append("\n[model]")
    lines += [f"{k} = {fmt(v)}" for k, v in cfg.model.items()]
    lines.append("\n[train]")
    lines += [f"{f.name} = {fmt(getattr(cfg.train, f.name))}" for f in dataclasses.fields(TrainConfig)]
    lines.append(f"\n[output]\ndir = {cfg.out_dir}")
    return "\n".join(lines) + "\n"
