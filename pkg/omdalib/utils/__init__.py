import dataclasses
import hashlib
import json
import os
import typing
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from omdalib import errors


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def write_json(path: str, obj, indent: Optional[int] = 2) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(obj, fp, indent=indent, sort_keys=True)
        fp.write("\n")


def read_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fp:
            return json.load(fp)
    except FileNotFoundError as e:
        raise errors.ConfigError("file not found: {}".format(path)) from e
    except ValueError as e:
        raise errors.ConfigError("{} is not valid JSON: {}".format(path, e)) from e


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def parse_seeds(text: str) -> List[int]:
    """
    ``"7"`` -> [7]; ``"1..5"`` -> [1, 2, 3, 4, 5]; ``"1,3,9"`` -> [1, 3, 9]
    """
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise errors.UsageError("empty seed range {}".format(text))
            return list(range(lo, hi + 1))
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise errors.UsageError("invalid seed list {!r}".format(text)) from e


def _check_type(value, hint, key):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(value, inner[0], key)
    if hint is bool:
        if not isinstance(value, bool):
            raise errors.ConfigError("expected a boolean, got {!r}".format(value), key=key)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise errors.ConfigError("expected an integer, got {!r}".format(value), key=key)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise errors.ConfigError("expected a number, got {!r}".format(value), key=key)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise errors.ConfigError("expected a string, got {!r}".format(value), key=key)
        return value
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise errors.ConfigError("expected a list, got {!r}".format(value), key=key)
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise errors.ConfigError("expected {} items, got {}".format(len(args), len(value)), key=key)
            return tuple(_check_type(v, a, key) for v, a in zip(value, args))
        item = args[0] if args else Any
        items = [v if item is Any else _check_type(v, item, key) for v in value]
        return tuple(items) if origin is tuple else items
    return value


def dataclass_from_dict(cls, obj: Dict[str, Any], prefix: str):
    """Build ``cls`` from defaults overridden by ``obj``; unknown keys and wrong types name the dotted key."""
    if not isinstance(obj, dict):
        raise errors.ConfigError("expected an object", key=prefix)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in obj.items():
        dotted = "{}.{}".format(prefix, key)
        if key not in names:
            raise errors.ConfigError("unknown key", key=dotted)
        kwargs[key] = _check_type(value, hints[key], dotted)
    return cls(**kwargs)


def dataclass_to_dict(obj) -> Dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def split_seed(*parts: int) -> int:
    """Derive an independent 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def check_keys(obj: Dict[str, Any], allowed: Tuple[str, ...], prefix: str = "") -> None:
    for key in obj:
        if key not in allowed:
            raise errors.ConfigError("unknown key", key=(prefix + key) if prefix else key)


RUN_CONFIG_KEYS = ("shift", "train", "data", "checkpoint")
DATA_KEYS = ("source", "target")


@dataclasses.dataclass
class RunConfig:
    """One resolved run document: ``{"shift", "train", "data", "checkpoint"}``."""
    shift: Any
    train: Any
    data: Dict[str, str] = dataclasses.field(default_factory=dict)
    checkpoint: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"shift": dataclass_to_dict(self.shift), "train": dataclass_to_dict(self.train),
                "data": dict(self.data), "checkpoint": self.checkpoint}

    def hash(self) -> str:
        return config_hash(self.to_dict())


def default_config() -> RunConfig:
    from omdalib.datamodel import ShiftConfig
    from omdalib.training import TrainConfig
    return RunConfig(shift=ShiftConfig(), train=TrainConfig())


def config_from_dict(obj: Dict[str, Any]) -> RunConfig:
    from omdalib.datamodel import ShiftConfig
    from omdalib.training import TrainConfig
    if not isinstance(obj, dict):
        raise errors.ConfigError("config must be a JSON object")
    check_keys(obj, RUN_CONFIG_KEYS)
    data = obj.get("data") or {}
    if not isinstance(data, dict):
        raise errors.ConfigError("expected an object", key="data")
    check_keys(data, DATA_KEYS, prefix="data.")
    for key, value in data.items():
        if not isinstance(value, str):
            raise errors.ConfigError("expected a path string, got {!r}".format(value), key="data." + key)
    checkpoint = obj.get("checkpoint")
    if checkpoint is not None and not isinstance(checkpoint, str):
        raise errors.ConfigError("expected a path string, got {!r}".format(checkpoint), key="checkpoint")
    shift = dataclass_from_dict(ShiftConfig, obj.get("shift") or {}, "shift")
    train = dataclass_from_dict(TrainConfig, obj.get("train") or {}, "train")
    shift.validate()
    train.validate()
    return RunConfig(shift=shift, train=train, data=dict(data), checkpoint=checkpoint)


def load_config(path: Optional[str] = None) -> RunConfig:
    """Defaults when ``path`` is None; otherwise the document merged onto the defaults."""
    if path is None:
        return default_config()
    return config_from_dict(read_json(path))
