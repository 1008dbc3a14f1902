"""Experiment configuration: one JSON document, schema-checked before any compute.

Layout::

    {
      "seed": 0,                      # master seed, overrides train.seed and data.seed
      "out": "runs/default",
      "protocol": "pges",             # pges | oracle | zero_shot | adapter
      "dataset": null,                # optional bundle from gen-data; replaces "data"
      "train": {...TrainConfig fields...},
      "data": {...generate_stream keywords...},
      "toggles": {"add": true, "prune": true, "lb": true, "routing": "top_p", "router": "task"}
    }

Every key is optional; omitted keys take the defaults below and are recorded
as ``default`` in the provenance map written to the run manifest.
"""

from __future__ import annotations

import copy
import hashlib
import inspect
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .taskgen import generate_stream
from .trainer import TrainConfig

SCHEMA_VERSION = 1
PROTOCOLS = ("pges", "oracle", "zero_shot", "adapter")

TOGGLE_DEFAULTS = {"add": True, "prune": True, "lb": True, "routing": "top_p", "router": "task"}

# command-line toggle tokens: token -> (axis, value)
TOGGLE_TOKENS = {
    "no_add": ("add", False),
    "add": ("add", True),
    "no_prune": ("prune", False),
    "prune": ("prune", True),
    "no_lb": ("lb", False),
    "lb": ("lb", True),
    "top2": ("routing", "top2"),
    "top_p": ("routing", "top_p"),
    "single_router": ("router", "shared"),
    "task_router": ("router", "task"),
}

# ablation grid rows: name -> toggle tokens applied on top of the base config
ABLATION_ROWS = {
    "full": (),
    "no_add": ("no_add",),
    "no_prune": ("no_prune",),
    "no_add_no_prune": ("no_add", "no_prune"),
    "no_lb": ("no_lb",),
    "top2": ("top2",),
    "single_router": ("single_router",),
}

_TOGGLE_FIELDS = {"enable_expand", "enable_prune", "enable_lb", "routing", "router_mode"}


def data_defaults() -> dict:
    sig = inspect.signature(generate_stream)
    out = {}
    for name, p in sig.parameters.items():
        if name in ("seed", "retries"):
            continue
        out[name] = list(p.default) if isinstance(p.default, tuple) else p.default
    return out


def train_defaults() -> dict:
    d = TrainConfig().to_dict()
    for k in _TOGGLE_FIELDS | {"seed"}:
        d.pop(k)
    return d


def _typed(value) -> dict:
    if isinstance(value, bool):
        return {"type": "boolean"}
    if isinstance(value, int):
        return {"type": "integer"}
    if isinstance(value, float):
        return {"type": "number"}
    if isinstance(value, str):
        return {"type": "string"}
    if isinstance(value, list):
        return {"type": "array", "items": {"type": "integer"}}
    raise TypeError(value)


def _section(defaults: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": {k: _typed(v) for k, v in defaults.items()}}


def schema() -> dict:
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "evomoe experiment",
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "seed": {"type": "integer", "minimum": 0},
            "out": {"type": "string"},
            "protocol": {"enum": list(PROTOCOLS)},
            "dataset": {"type": ["string", "null"]},
            "train": _section(train_defaults()),
            "data": _section(data_defaults()),
            "toggles": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "add": {"type": "boolean"},
                    "prune": {"type": "boolean"},
                    "lb": {"type": "boolean"},
                    "routing": {"enum": ["top_p", "top2"]},
                    "router": {"enum": ["task", "shared"]},
                },
            },
        },
    }


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    protocol: str = "pges"
    dataset: str | None = None
    train: dict = field(default_factory=train_defaults)
    data: dict = field(default_factory=data_defaults)
    toggles: dict = field(default_factory=lambda: dict(TOGGLE_DEFAULTS))
    provenance: dict = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        t = self.toggles
        return TrainConfig(
            **self.train,
            seed=self.seed,
            enable_expand=t["add"],
            enable_prune=t["prune"],
            enable_lb=t["lb"],
            routing=t["routing"],
            router_mode=t["router"],
        )

    def stream_kwargs(self) -> dict:
        kw = dict(self.data)
        kw["hard_tasks"] = tuple(kw["hard_tasks"])
        kw["seed"] = self.seed
        return kw

    def to_dict(self) -> dict:
        """Canonical content (no provenance); what the config hash covers."""
        return {
            "seed": self.seed,
            "out": self.out,
            "protocol": self.protocol,
            "dataset": self.dataset,
            "train": dict(sorted(self.train.items())),
            "data": dict(sorted(self.data.items())),
            "toggles": dict(sorted(self.toggles.items())),
        }

    def hash(self) -> str:
        content = self.to_dict()
        content.pop("out")  # where results go does not change them
        return hashlib.sha256(json.dumps(content, sort_keys=True).encode()).hexdigest()

    def with_toggles(self, tokens) -> "ExperimentConfig":
        clone = copy.deepcopy(self)
        clone.toggles.update(parse_toggles(tokens))
        for axis in parse_toggles(tokens):
            clone.provenance[f"toggles.{axis}"] = "override"
        return clone


def parse_toggles(tokens) -> dict:
    """``"no_add,top2"`` or an iterable of tokens -> {axis: value}; contradicting tokens raise."""
    if isinstance(tokens, str):
        tokens = [t for t in re.split(r"[,\s]+", tokens) if t]
    out: dict = {}
    for tok in tokens:
        if tok not in TOGGLE_TOKENS:
            raise ConfigError(f"unknown toggle {tok!r}; choose from {sorted(TOGGLE_TOKENS)}")
        axis, value = TOGGLE_TOKENS[tok]
        if axis in out and out[axis] != value:
            raise ConfigError(f"conflicting toggles for {axis!r}: {out[axis]!r} vs {value!r}")
        out[axis] = value
    return out


def _line_of(text: str, path) -> int | None:
    """Best-effort line number of the JSON key at ``path`` (a sequence of keys)."""
    pos = 0
    line = None
    for key in path:
        if not isinstance(key, str):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            return line
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def _unknown_key(err: jsonschema.ValidationError) -> str | None:
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        return extra[0] if extra else None
    return None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for err in errors:
            path = list(err.absolute_path)
            extra = _unknown_key(err)
            if extra is not None:
                path = path + [extra]
                what = f"unknown key {'.'.join(map(str, path))!r}"
            else:
                what = f"{'.'.join(map(str, path)) or '<root>'}: {err.message}"
            line = _line_of(text, path)
            msgs.append(f"{source}:{line if line is not None else 1}: {what}")
        raise ConfigError("\n".join(msgs))

    cfg = ExperimentConfig()
    prov = {}
    for key in ("seed", "out", "protocol", "dataset"):
        if key in raw:
            setattr(cfg, key, raw[key])
        prov[key] = "user" if key in raw else "default"
    for section in ("train", "data", "toggles"):
        target = getattr(cfg, section)
        given = raw.get(section, {})
        for k in target:
            if k in given:
                value = given[k]
                # integers are valid numbers; keep float fields float for stable hashing
                target[k] = float(value) if isinstance(target[k], float) and not isinstance(value, bool) else value
            prov[f"{section}.{k}"] = "user" if k in given else "default"
    cfg.provenance = prov
    try:
        cfg.train_config()
    except (ConfigError, TypeError) as exc:
        raise ConfigError(f"{source}:1: {exc}") from exc
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return parse_config("{}", "<defaults>")
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config ({exc.strerror})") from exc
    return parse_config(text, str(p))


__all__ = [
    "ABLATION_ROWS",
    "ExperimentConfig",
    "SCHEMA_VERSION",
    "TOGGLE_TOKENS",
    "load_config",
    "parse_config",
    "parse_toggles",
    "schema",
]
