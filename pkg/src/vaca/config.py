"""INI experiment configs: sections of flat ``key = value`` pairs.

Sections: ``[experiment]`` (data source, seeds, output), ``[model]`` (any
:class:`~vaca.model.VacaConfig` field), ``[metrics]``, optional ``[graph]`` and
``[data]`` for CSV inputs, and ``[sweep]`` whose keys list comma-separated
values of model fields to cross. Unknown sections or keys are rejected with the
offending ``section.key`` in the message.
"""

from __future__ import annotations

import configparser
import itertools
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .graph import CausalGraph, GraphError, format_graph_block, parse_graph_block
from .metrics import DEFAULT_GAMMAS
from .model import ConfigError, VacaConfig


@dataclass
class ExperimentSection:
    name: str = "experiment"
    scm: str = "collider"  # built-in SCM name, or "csv" with [graph] and [data]
    sem: str | None = "LIN"
    n_samples: int = 10_000
    data_seed: int = 0
    seeds: tuple[int, ...] = (0,)
    output: str = ""


@dataclass
class MetricsSection:
    n: int = 1000
    gammas: tuple[float, ...] = DEFAULT_GAMMAS
    estimator: str = "verbatim"
    cf_mode: str = "mean"
    median_heuristic: bool = False
    cf_max_rows: int | None = None


@dataclass
class DataSection:
    path: str = ""
    label: str | None = None
    fractions: tuple[float, ...] = (0.8, 0.1, 0.1)
    sensitive: str | None = None


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: VacaConfig = field(default_factory=VacaConfig)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    data: DataSection = field(default_factory=DataSection)
    graph: CausalGraph | None = None
    sweep: dict[str, tuple] = field(default_factory=dict)

    def validate(self) -> "ExperimentConfig":
        exp = self.experiment
        if exp.scm == "csv":
            if self.graph is None or not self.data.path:
                raise ConfigError("experiment.scm = csv needs a [graph] section and data.path")
        else:
            from .scm import builtin_scm

            try:
                builtin_scm(exp.scm, exp.sem)
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"experiment.scm/sem: {exc}") from None
        if exp.n_samples < 4:
            raise ConfigError("experiment.n_samples must be at least 4")
        if not exp.seeds:
            raise ConfigError("experiment.seeds must list at least one seed")
        if self.metrics.estimator not in ("verbatim", "unbiased"):
            raise ConfigError(f"metrics.estimator must be verbatim or unbiased, got {self.metrics.estimator!r}")
        if self.metrics.cf_mode not in ("mean", "sample"):
            raise ConfigError(f"metrics.cf_mode must be mean or sample, got {self.metrics.cf_mode!r}")
        if self.metrics.n < 2 or any(g <= 0 for g in self.metrics.gammas):
            raise ConfigError("metrics.n must be >= 2 and metrics.gammas positive")
        model_keys = {f.name for f in fields(VacaConfig)}
        for key in self.sweep:
            if key not in model_keys:
                raise ConfigError(f"sweep.{key}: not a model field")
        try:
            self.model.validate(self.graph_for_validation())
            for point in self.grid():
                point.validate(self.graph_for_validation())
        except ConfigError as exc:
            raise ConfigError(f"model: {exc}") from None
        return self

    def graph_for_validation(self) -> CausalGraph | None:
        if self.graph is not None:
            return self.graph
        if self.experiment.scm != "csv":
            from .scm import builtin_graph

            return builtin_graph(self.experiment.scm)
        return None

    def grid(self) -> list[VacaConfig]:
        """Model configs of the sweep grid (a single entry without a [sweep] section)."""
        if not self.sweep:
            return [self.model]
        keys = sorted(self.sweep)
        return [replace(self.model, **dict(zip(keys, combo)))
                for combo in itertools.product(*(self.sweep[k] for k in keys))]


# -- value conversion -----------------------------------------------------------------------


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _parse_value(text: str, hint, where: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _parse_value(text, inner[0], where)
    if origin is tuple:
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        return tuple(_parse_value(p, args[0], where) for p in parts)
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {hint.__name__}") from None
    raise ConfigError(f"{where}: unsupported field type {hint}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _fill(cls, section: configparser.SectionProxy, name: str):
    hints = _hints(cls)
    known = {f.name for f in fields(cls)}
    values = {}
    for key, text in section.items():
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}")
        values[key] = _parse_value(text, hints[key], f"{name}.{key}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


SECTIONS = ("experiment", "model", "metrics", "data", "graph", "sweep")


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    cfg = ExperimentConfig()
    if cp.has_section("experiment"):
        cfg.experiment = _fill(ExperimentSection, cp["experiment"], "experiment")
    if cp.has_section("model"):
        cfg.model = _fill(VacaConfig, cp["model"], "model")
    if cp.has_section("metrics"):
        cfg.metrics = _fill(MetricsSection, cp["metrics"], "metrics")
    if cp.has_section("data"):
        cfg.data = _fill(DataSection, cp["data"], "data")
    if cp.has_section("graph"):
        sec = cp["graph"]
        extra = sorted(set(sec) - {"nodes", "edges"})
        if extra:
            raise ConfigError(f"unknown key graph.{extra[0]}")
        if "nodes" not in sec:
            raise ConfigError("graph.nodes is required in a [graph] section")
        try:
            cfg.graph = parse_graph_block(sec["nodes"], sec.get("edges", "[]"))
        except GraphError as exc:
            raise ConfigError(f"graph: {exc}") from None
    if cp.has_section("sweep"):
        hints = _hints(VacaConfig)
        for key, text in cp["sweep"].items():
            if key not in hints:
                raise ConfigError(f"unknown key sweep.{key}")
            hint = hints[key]
            if typing.get_origin(hint) is tuple:
                # each grid value of a tuple field is written as a|b|c
                vals = tuple(_parse_value(v.replace("|", ","), hint, f"sweep.{key}") for v in text.split(","))
            else:
                vals = tuple(_parse_value(v, hint, f"sweep.{key}") for v in text.split(","))
            cfg.sweep[key] = vals
    return cfg


def apply_overrides(model: VacaConfig, pairs: list[str]) -> VacaConfig:
    """Model fields overridden by ``key=value`` strings."""
    hints = _hints(VacaConfig)
    values = {}
    for pair in pairs:
        key, sep, text = pair.partition("=")
        key = key.strip()
        if not sep or key not in hints:
            raise ConfigError(f"unknown key model.{key}" if sep else f"override {pair!r} is not key=value")
        values[key] = _parse_value(text, hints[key], f"model.{key}")
    return replace(model, **values)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file {path}")
    return parse_config(path.read_text(), str(path))


def _section(obj) -> dict[str, str]:
    return {f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)}


def format_config(cfg: ExperimentConfig) -> str:
    """INI text that :func:`parse_config` maps back to an equal config."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["experiment"] = _section(cfg.experiment)
    cp["model"] = _section(cfg.model)
    cp["metrics"] = _section(cfg.metrics)
    cp["data"] = _section(cfg.data)
    if cfg.graph is not None:
        nodes, edges = format_graph_block(cfg.graph)
        cp["graph"] = {"nodes": nodes, "edges": edges}
    if cfg.sweep:
        cp["sweep"] = {k: ", ".join(_format_value(v).replace(", ", "|") for v in vals)
                       for k, vals in cfg.sweep.items()}
    import io

    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def save_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_config(cfg))
    return path
