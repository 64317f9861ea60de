# JSON configuration: defaults, loading, dotted-path overrides and typed builders.
import copy
import json
from typing import Any, Optional

from .data import SynthConfig
from .model import AutoencoderConfig, NetworkConfig, default_autoencoder_config, desk_config, paper_config
from .trainer import TrainConfig, desk_train_config, paper_train_config
from .validation import validate_config_document

DEFAULT_CONFIG = {
    "data": {
        "root": None,
        "train_anomalies": None,
        "anomaly_seed": 0,
        "extra_anomalies": None,
        "extra_limit": None,
    },
    "synth": {
        "n_normal": 500,
        "n_anomalous": 50,
        "n_test_normal": 100,
        "n_test_anomalous": 50,
        "channels": 3,
        "h": 64,
        "w": 64,
        "blob_sigma": [2.0, 4.0],
        "amplitude": 0.5,
        "smoothing": 2,
        "seed": 0,
    },
    "network": {
        "preset": "desk",
        "input_shape": None,
        "train_centre": True,
    },
    "autoencoder": {
        "enabled": False,
    },
    "train": {
        "preset": "desk",
        "mode": "unsup_no_anom",
        "gamma": 0.0,
        "lr": 1e-3,
        "momentum": 0.9,
        "weight_decay": 1e-6,
        "epochs": None,
        "batch_size": None,
        "n_instances": 5,
        "base_seed": 0,
        "skip_policy": "error",
        "sigma": None,
        "hflip": False,
        "progress": False,
    },
    "eval": {
        "criterion": "distance",
        "checkpoints": None,
        "export_heatmaps": 0,
    },
    "inspect": {
        "image": None,
        "boxes": None,
        "checkpoint": None,
        "threshold": None,
        "threshold_from": None,
        "instance": 0,
    },
    "sweep": {
        "anomalies": [0, 1, 2, 5, 10],
        "ss_mode": "ss_focal",
        "gammas": None,
    },
    "gradcheck": {
        "instances": 20,
        "eps": 1e-5,
        "tol": 1e-4,
        "seed": 0,
    },
    "output": {
        "dir": "runs",
    },
}


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ValueError(f"{path}: unknown config key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"{path}: expected an object")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value
    return base


def load_config(path: Optional[str] = None) -> dict:
    """Defaults, deep-merged with the JSON document at path when given."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                user = json.load(f)
        except OSError as e:
            raise OSError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: malformed JSON: {e}") from e
        if not isinstance(user, dict):
            raise ValueError(f"{path}: the config must be a JSON object")
        _merge(config, user)
    return config


def parse_value(text: str) -> Any:
    """JSON literal if it parses, plain string otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignment(text: str) -> tuple[str, Any]:
    path, sep, value = text.partition("=")
    if not sep or not path:
        raise ValueError(f"expected path=value, got {text!r}")
    return path.strip(), parse_value(value.strip())


def apply_overrides(config: dict, overrides: dict[str, Any]) -> dict:
    """Set dotted paths (e.g. "train.lr") in place; unknown paths are rejected."""
    for path, value in overrides.items():
        keys = path.split(".")
        node = config
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise ValueError(f"{path}: unknown config path")
            node = node[key]
        if keys[-1] not in node or isinstance(node[keys[-1]], dict):
            raise ValueError(f"{path}: unknown config path")
        node[keys[-1]] = value
    return config


def check_config(config: dict) -> None:
    ok, msg = validate_config_document(config)
    if not ok:
        raise ValueError(msg)


def network_config_from(config: dict, seed: int = 0) -> NetworkConfig:
    section = config["network"]
    preset = desk_config if section["preset"] == "desk" else paper_config
    overrides = {"train_centre": bool(section["train_centre"])}
    if section["input_shape"] is not None:
        overrides["input_shape"] = tuple(section["input_shape"])
    return preset(seed, **overrides)


def autoencoder_config_from(config: dict, seed: int = 0) -> AutoencoderConfig:
    return default_autoencoder_config(network_config_from(config).input_shape, seed)


def train_config_from(config: dict, **overrides) -> TrainConfig:
    section = config["train"]
    preset = desk_train_config if section["preset"] == "desk" else paper_train_config
    fields = {k: v for k, v in section.items() if k != "preset" and v is not None}
    fields.update(overrides)
    return preset(**fields)


def synth_config_from(config: dict) -> SynthConfig:
    section = dict(config["synth"])
    section["blob_sigma"] = tuple(section["blob_sigma"])
    return SynthConfig(**section)
