"""Experiment configuration: JSON file + schema, presets and command-line overrides.

Precedence is flags > config file > preset > built-in defaults.  Unknown keys
are rejected by the schema (``data/config.schema.json``).
"""
import copy
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import torch

from .data import PersonDataset, toy_dataset
from .evaluation import EvalProtocol
from .trainer import TrainConfig

CACHE_ENV = "DEPATCH_CACHE"

# Desk scale: 160x160 toy scenes, so the patch covers a larger share of the
# person than on full-size photos and each epoch is a fixed number of batches.
DESK_PLACEMENT = {"relative_size": 0.45, "anchor": 0.45}
PRESETS = {
    "default": {},
    "desk": {
        "train": {"patch_size": [64, 64], "epochs": 500, "batch_size": 8, "batches_per_epoch": 8,
                  "placement": DESK_PLACEMENT},
        "eval": {"placement": DESK_PLACEMENT},
        "train_data": {"toy": {"count": 200, "seed": 0, "split": "train"}},
        "test_data": {"toy": {"count": 100, "seed": 0, "split": "test"}},
        "compare": {"seeds": [0, 1, 2], "area": None},
    },
}


class ConfigError(Exception):
    """Invalid configuration; the CLI maps it to exit code 2."""


def schema():
    return json.loads(resources.files("depatch").joinpath("data/config.schema.json").read_text("utf-8"))


@dataclass
class ExperimentConfig:
    train: TrainConfig
    eval: EvalProtocol
    train_data: Optional[dict] = None
    test_data: Optional[dict] = None
    detector: dict = field(default_factory=lambda: {"name": "toy", "checkpoint": None})
    output_dir: str = "runs/default"
    compare: dict = field(default_factory=lambda: {"seeds": [0], "area": 90000})
    sweep: dict = field(default_factory=lambda: {"ratios": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]})
    raw: dict = field(default_factory=dict)

    def resolved(self):
        return {"output_dir": self.output_dir, "detector": self.detector,
                "train_data": self.train_data, "test_data": self.test_data,
                "train": self.train.to_dict(), "eval": self.eval.to_dict(),
                "compare": self.compare, "sweep": self.sweep}

    def write_resolved(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.resolved.json"
        path.write_text(json.dumps(self.resolved(), indent=2, sort_keys=True, default=list) + "\n")
        return path


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _key_line(text, path):
    """Best-effort line number of the last key of ``path`` in the JSON text."""
    keys = [p for p in path if isinstance(p, str)]
    if not text or not keys:
        return None
    needle = f'"{keys[-1]}"'
    for lineno, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return lineno
    return None


def parse_override(item):
    """``section.key=value`` with a JSON value (bare strings allowed)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    try:
        value = json.loads(value)
    except json.JSONDecodeError:
        pass
    out = cur = {}
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def load_config(path=None, overrides=(), text=None):
    """Build an :class:`ExperimentConfig` from a JSON file and override dicts."""
    raw = {}
    if path is not None or text is not None:
        if text is None:
            try:
                text = Path(path).read_text("utf-8")
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path or '<config>'}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    for ov in overrides:
        raw = _merge(raw, ov)
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        lines = []
        for e in errors:
            where = ".".join(str(p) for p in e.path) or "<root>"
            key_path = list(e.path)
            if e.validator == "additionalProperties" and isinstance(e.instance, dict):
                # point at the offending key rather than its parent
                extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
                key_path += extra[:1]
            line = _key_line(text, key_path)
            prefix = f"{path or '<config>'}:{line}: " if line else ""
            lines.append(f"{prefix}{where}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))

    merged = _merge(PRESETS[raw.get("preset", "default")], raw)
    train = dict(merged.get("train", {}))
    ev = dict(merged.get("eval", {}))
    if "placement" in train and "placement" not in ev:
        ev["placement"] = train["placement"]
    if "transforms" in train and "transforms" not in ev:
        ev["transforms"] = train["transforms"]
    det = {"name": "toy", "checkpoint": None, **merged.get("detector", {})}
    train.setdefault("detector", det["name"])
    try:
        cfg = ExperimentConfig(
            train=TrainConfig(**train), eval=EvalProtocol(**ev),
            train_data=merged.get("train_data"), test_data=merged.get("test_data"),
            detector=det, output_dir=merged.get("output_dir", "runs/default"),
            compare={"seeds": [0], "area": 90000, **merged.get("compare", {})},
            sweep={"ratios": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5], **merged.get("sweep", {})},
            raw=raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from None
    return cfg


def cache_dir():
    d = os.environ.get(CACHE_ENV)
    return Path(d) if d else None


def load_dataset(spec, field_name, size=160):
    """Dataset from a config section: ``{"path": dir, "split": name}`` or ``{"toy": {...}}``."""
    if not spec:
        raise ConfigError(f"{field_name}: dataset is required")
    if "toy" in spec:
        toy = {"count": 200, "seed": 0, "split": "train", **spec["toy"]}
        cache = cache_dir()
        if cache is not None:
            f = cache / f"toy_{toy['count']}_{toy['seed']}_{toy['split']}_{size}.pt"
            if f.exists():
                d = torch.load(f, weights_only=False)
                return PersonDataset(d["images"], [np.asarray(b) for b in d["boxes"]])
            ds = toy_dataset(toy["count"], seed=toy["seed"], split=toy["split"], size=size)
            cache.mkdir(parents=True, exist_ok=True)
            torch.save({"images": ds.images, "boxes": ds.boxes}, f)
            return ds
        return toy_dataset(toy["count"], seed=toy["seed"], split=toy["split"], size=size)
    if "path" not in spec:
        raise ConfigError(f"{field_name}: give either 'path' or 'toy'")
    root = Path(spec["path"])
    if not root.is_dir():
        raise ConfigError(f"{field_name}.path: dataset directory {root} does not exist")
    try:
        return PersonDataset.load(root, spec.get("split", "train"), size=size)
    except (FileNotFoundError, ValueError) as e:
        raise ConfigError(f"{field_name}: {e}") from None
