"""Experiment configuration: a YAML file validated against a fixed schema.

Errors carry the file, line and dotted field path of the offending entry.
A run manifest (JSON, which is also valid YAML) can be passed wherever a
config is expected; its ``config`` snapshot is used.

Schema (defaults in brackets)::

    name: str                     ["experiment"]
    model: str | mapping          ["mlp"]  reference name, or
                                  {kind: mlp, sizes: [..], activation: relu|tanh}
    dataset:                      source-specific mapping, see DATASET_FIELDS
    init: kaiming|xavier|normal   ["kaiming"]
    criteria: [str]               [["grasp"]]
    ratios: [float in [0, 1)]     [[0.95]]
    temperature: float > 0        [200.0]  GraSP scoring temperature
    snip_temperature: float > 0   [1.0]
    trials: int >= 1              [1]
    seed: int >= 0                [0]
    workers: int >= 1             [1]
    out: str                      ["runs/<name>"]
    scoring: {per_class [10], batches [1], balanced [true]}
    train: {epochs [20], batch_size [128], lr [0.1], momentum [0.9],
            weight_decay [5e-4], milestones [[0.5, 0.75]], gamma [0.1]}
    gradnorm: {temperature [1.0], batch_size [1000]}
    ntk: {per_class [2], ratios [[0.0, 0.98]], budget [4000],
          dynamics: null | {width [2048], n [20], dim [10], steps [100],
                            lr_scale [0.5], seed [0]}}
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .criteria import CRITERIA
from .nn import INIT_SCHEMES


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None, field: str = ""):
        self.message = message
        self.source = source
        self.line = line
        self.field = field
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {field + ': ' if field else ''}{message}")


@dataclass(frozen=True)
class F:
    """One schema field."""

    kind: str  # int, float, str, bool, floats, strs, section, model, any
    default: Any = None
    lo: float | None = None
    hi: float | None = None
    lo_open: bool = False
    hi_open: bool = False
    choices: tuple | None = None
    nullable: bool = False


SCORING_FIELDS = {
    "per_class": F("int", 10, lo=1),
    "batches": F("int", 1, lo=1),
    "balanced": F("bool", True),
}
TRAIN_FIELDS = {
    "epochs": F("int", 20, lo=0),
    "batch_size": F("int", 128, lo=1),
    "lr": F("float", 0.1, lo=0, lo_open=True),
    "momentum": F("float", 0.9, lo=0, hi=1, hi_open=True),
    "weight_decay": F("float", 5e-4, lo=0),
    "milestones": F("floats", [0.5, 0.75], lo=0, hi=1, lo_open=True, hi_open=True),
    "gamma": F("float", 0.1, lo=0, lo_open=True),
}
GRADNORM_FIELDS = {
    "temperature": F("float", 1.0, lo=0, lo_open=True),
    "batch_size": F("int", 1000, lo=1),
}
DYNAMICS_FIELDS = {
    "width": F("int", 2048, lo=1),
    "n": F("int", 20, lo=1),
    "dim": F("int", 10, lo=1),
    "steps": F("int", 100, lo=1),
    "lr_scale": F("float", 0.5, lo=0, hi=2, lo_open=True, hi_open=True),
    "seed": F("int", 0, lo=0),
}
NTK_FIELDS = {
    "per_class": F("int", 2, lo=1),
    "ratios": F("floats", [0.0, 0.98], lo=0, hi=1, hi_open=True),
    "budget": F("int", 4000, lo=1),
    "dynamics": F("section", None, nullable=True),
}
DATASET_FIELDS = {
    "digits": {"source": F("str"), "side": F("int", 28, lo=8), "n_train": F("int", 1400, lo=10, hi=1787)},
    "synthetic": {
        "source": F("str"),
        "k": F("int", 10, lo=2),
        "n_per_class": F("int", 100, lo=1),
        "test_per_class": F("int", 50, lo=1),
        "dim": F("int", 784, lo=1),
        "separation": F("float", 3.0, lo=0, lo_open=True),
        "seed": F("int", 0, lo=0),
    },
    "idx": {
        "source": F("str"),
        "train_images": F("str"),
        "train_labels": F("str"),
        "test_images": F("str"),
        "test_labels": F("str"),
    },
    "container": {"source": F("str"), "train": F("str"), "test": F("str")},
}
MODEL_FIELDS = {
    "kind": F("str", "mlp", choices=("mlp",)),
    "sizes": F("ints"),
    "activation": F("str", "relu", choices=("relu", "tanh")),
}
TOP_FIELDS = {
    "name": F("str", "experiment"),
    "model": F("model", "mlp"),
    "dataset": F("section", {"source": "digits"}),
    "init": F("str", "kaiming", choices=INIT_SCHEMES),
    "criteria": F("strs", ["grasp"], choices=CRITERIA),
    "ratios": F("floats", [0.95], lo=0, hi=1, hi_open=True),
    "temperature": F("float", 200.0, lo=0, lo_open=True),
    "snip_temperature": F("float", 1.0, lo=0, lo_open=True),
    "trials": F("int", 1, lo=1),
    "seed": F("int", 0, lo=0),
    "workers": F("int", 1, lo=1),
    "out": F("str", None, nullable=True),
    "scoring": F("section", {}),
    "train": F("section", {}),
    "gradnorm": F("section", {}),
    "ntk": F("section", {}),
}
SECTIONS = {"scoring": SCORING_FIELDS, "train": TRAIN_FIELDS, "gradnorm": GRADNORM_FIELDS, "ntk": NTK_FIELDS}
REFERENCE_MODELS = ("mlp", "deep_mlp", "convnet")


# ---------------------------------------------------------------- line marks


def _marks(node, path=(), out=None) -> dict:
    """Map dotted paths to 1-based line numbers using the YAML node tree."""
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            p = path + (str(key.value),)
            out[p] = key.start_mark.line + 1
            _marks(value, p, out)
            out[p] = key.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _marks(item, path + (i,), out)
    return out


def _dotted(path) -> str:
    s = ""
    for p in path:
        s += f"[{p}]" if isinstance(p, int) else (f".{p}" if s else str(p))
    return s


class _Checker:
    def __init__(self, source: str, marks: dict, prefix=()):
        self.source = source
        self.marks = marks
        self.prefix = tuple(prefix)

    def fail(self, path, message):
        full = self.prefix + tuple(path)
        line = None
        for n in range(len(full), -1, -1):
            if full[:n] in self.marks:
                line = self.marks[full[:n]]
                break
        raise ConfigError(message, self.source, line, _dotted(path))

    def scalar(self, path, value, f: F):
        if value is None:
            if f.nullable:
                return None
            self.fail(path, "value is required")
        kind = f.kind
        if kind == "bool":
            if not isinstance(value, bool):
                self.fail(path, f"expected true/false, got {value!r}")
            return value
        if kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                self.fail(path, f"expected an integer, got {value!r}")
        elif kind == "float":
            if isinstance(value, bool):
                self.fail(path, f"expected a number, got {value!r}")
            try:
                value = float(value)  # YAML 1.1 reads "1e-3" as a string
            except (TypeError, ValueError):
                self.fail(path, f"expected a number, got {value!r}")
        elif kind == "str":
            if not isinstance(value, str):
                self.fail(path, f"expected a string, got {value!r}")
            if f.choices and value not in f.choices:
                self.fail(path, f"{value!r} is not one of {list(f.choices)}")
            return value
        if f.lo is not None and (value < f.lo or (f.lo_open and value == f.lo)):
            self.fail(path, f"must be {'>' if f.lo_open else '>='} {f.lo}, got {value}")
        if f.hi is not None and (value > f.hi or (f.hi_open and value == f.hi)):
            self.fail(path, f"must be {'<' if f.hi_open else '<='} {f.hi}, got {value}")
        return value

    def value(self, path, value, f: F):
        if f.kind in ("floats", "strs", "ints"):
            if not isinstance(value, list) or not value:
                self.fail(path, "expected a non-empty list")
            item = F({"floats": "float", "strs": "str", "ints": "int"}[f.kind], lo=f.lo, hi=f.hi,
                     lo_open=f.lo_open, hi_open=f.hi_open, choices=f.choices)
            return [self.scalar(tuple(path) + (i,), v, item) for i, v in enumerate(value)]
        return self.scalar(path, value, f)

    def section(self, path, data, fields: dict) -> dict:
        if data is None:
            data = {}
        if not isinstance(data, dict):
            self.fail(path, "expected a mapping")
        for key in data:
            if key not in fields:
                self.fail(tuple(path) + (str(key),), f"unknown field; expected one of {sorted(fields)}")
        out = {}
        for key, f in fields.items():
            p = tuple(path) + (key,)
            if key in data:
                out[key] = self.value(p, data[key], f)
            elif f.default is None and not f.nullable:
                self.fail(p, "missing required field")
            else:
                out[key] = copy.deepcopy(f.default)
        return out


def _validate(raw: dict, chk: _Checker, base_dir: Path) -> dict:
    if not isinstance(raw, dict):
        chk.fail((), "top level must be a mapping")
    for key in raw:
        if key not in TOP_FIELDS:
            chk.fail((str(key),), f"unknown field; expected one of {sorted(TOP_FIELDS)}")
    cfg = {}
    for key, f in TOP_FIELDS.items():
        value = raw.get(key, copy.deepcopy(f.default))
        if f.kind == "section":
            continue
        if f.kind == "model":
            cfg[key] = _validate_model(value, chk)
        else:
            cfg[key] = chk.value((key,), value, f) if key in raw else value
    for key, fields in SECTIONS.items():
        cfg[key] = chk.section((key,), raw.get(key), fields)
    dyn = cfg["ntk"]["dynamics"]
    if dyn is not None:
        cfg["ntk"]["dynamics"] = chk.section(("ntk", "dynamics"), dyn, DYNAMICS_FIELDS)
    ms = cfg["train"]["milestones"]
    if any(b <= a for a, b in zip(ms, ms[1:])):
        chk.fail(("train", "milestones"), "milestones must be strictly increasing")
    cfg["dataset"] = _validate_dataset(raw.get("dataset", {"source": "digits"}), chk, base_dir)
    if len(set(cfg["criteria"])) != len(cfg["criteria"]):
        chk.fail(("criteria",), "criteria must not repeat")
    if cfg["out"] is None:
        cfg["out"] = f"runs/{cfg['name']}"
    return cfg


def _validate_model(value, chk: _Checker):
    if isinstance(value, str):
        if value not in REFERENCE_MODELS:
            chk.fail(("model",), f"unknown reference model {value!r}; expected one of {list(REFERENCE_MODELS)} or a mapping")
        return value
    model = chk.section(("model",), value, MODEL_FIELDS)
    if len(model["sizes"]) < 2 or min(model["sizes"]) < 1:
        chk.fail(("model", "sizes"), "need at least two positive layer sizes")
    return model


def _validate_dataset(value, chk: _Checker, base_dir: Path) -> dict:
    if not isinstance(value, dict):
        chk.fail(("dataset",), "expected a mapping with a 'source' field")
    source = value.get("source")
    if source not in DATASET_FIELDS:
        chk.fail(("dataset", "source"), f"expected one of {sorted(DATASET_FIELDS)}, got {source!r}")
    ds = chk.section(("dataset",), value, DATASET_FIELDS[source])
    for key in ("train_images", "train_labels", "test_images", "test_labels", "train", "test"):
        if key in ds:
            p = Path(ds[key]).expanduser()
            ds[key] = str(p if p.is_absolute() else (base_dir / p).resolve())
    return ds


# -------------------------------------------------------------------- loading


def packaged_config(name: str) -> Path | None:
    """Path of a reference config shipped with the package, if ``name`` is one."""
    ref = resources.files("foresight") / "configs" / f"{name}.yaml"
    return Path(str(ref)) if ref.is_file() else None


def list_packaged_configs() -> list[str]:
    root = resources.files("foresight") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> dict:
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", source,
                          mark.line + 1 if mark else None) from None
    if raw is None:
        raw = {}
    marks = _marks(node) if node is not None else {}
    prefix = ()
    if isinstance(raw, dict) and "manifest_version" in raw:
        if "config" not in raw:
            raise ConfigError("manifest has no config snapshot", source, 1, "config")
        raw, prefix = raw["config"], ("config",)
    return _validate(raw, _Checker(source, marks, prefix), base_dir or Path.cwd())


def load_config(path_or_name) -> dict:
    """Load and validate a config file (or a packaged config by bare name)."""
    path = Path(path_or_name)
    if not path.exists():
        ref = packaged_config(str(path_or_name))
        if ref is None:
            raise ConfigError(f"no such file, and no packaged config named {str(path_or_name)!r} "
                              f"(available: {', '.join(list_packaged_configs())})", str(path_or_name))
        path = ref
    return parse_config(path.read_text(), str(path), path.parent.resolve())


def apply_overrides(cfg: dict, seed=None, out=None, trials=None, criteria=None, ratios=None,
                    temperature=None) -> dict:
    """Apply command-line overrides and re-validate the result."""
    raw = copy.deepcopy(cfg)
    for key, value in (("seed", seed), ("out", out), ("trials", trials), ("temperature", temperature)):
        if value is not None:
            raw[key] = value
    if criteria:
        raw["criteria"] = list(criteria)
    if ratios:
        raw["ratios"] = list(ratios)
    return _validate(raw, _Checker("<command line>", {}), Path.cwd())


def snapshot(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True)
