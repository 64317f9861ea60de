# Validation rules for configs, layer stacks and detector boxes.
# Every validator returns (ok, message) and never raises; callers decide how to fail.
import math
from typing import TYPE_CHECKING, Sequence, Tuple

if TYPE_CHECKING:
    from .model import LayerSpec
    from .trainer import TrainConfig
    from .data import SynthConfig

TRAIN_MODES = ("unsup_no_anom", "unsup_with_anom", "ss_original", "ss_modified", "ss_focal")
SKIP_POLICIES = ("error", "skip_batch")
CRITERIA = ("distance", "youden")
LAYER_KINDS = ("conv", "batchnorm", "leakyrelu", "maxpool", "upsample")


def walk_shapes(layers: Sequence["LayerSpec"], input_shape: Sequence[int]) -> Tuple[bool, str, tuple]:
    """Propagate (c, h, w) through a layer stack.

    Returns (ok, message, output_shape); on failure the message names the layer index.
    """
    if len(input_shape) != 3 or any(int(d) < 1 for d in input_shape):
        return False, f"input shape must be three positive integers (c, h, w), got {tuple(input_shape)}", ()
    c, h, w = (int(d) for d in input_shape)
    for i, spec in enumerate(layers):
        if spec.kind not in LAYER_KINDS:
            return False, f"layer {i}: unknown kind {spec.kind!r}", ()
        if spec.kind == "conv":
            if spec.out_channels < 1:
                return False, f"layer {i}: conv needs out_channels >= 1", ()
            if spec.kernel < 1 or spec.stride < 1 or spec.padding < 0:
                return False, f"layer {i}: conv needs kernel >= 1, stride >= 1, padding >= 0", ()
            h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            c = spec.out_channels
        elif spec.kind == "maxpool":
            if h % 2 or w % 2:
                return False, f"layer {i}: maxpool needs even spatial dims, got {h}x{w}", ()
            h, w = h // 2, w // 2
        elif spec.kind == "upsample":
            h, w = 2 * h, 2 * w
        elif spec.kind == "leakyrelu":
            if not 0.0 <= spec.slope <= 1.0:
                return False, f"layer {i}: leaky ReLU slope must lie in [0, 1]", ()
        if h < 1 or w < 1:
            return False, f"layer {i}: spatial dims became non-positive ({h}x{w})", ()
    return True, "Valid layer stack", (c, h, w)


def validate_network_layers(layers: Sequence["LayerSpec"], input_shape: Sequence[int],
                            one_class: bool = True) -> Tuple[bool, str]:
    if not layers:
        return False, "network has no layers"
    ok, msg, _ = walk_shapes(layers, input_shape)
    if not ok:
        return ok, msg
    if one_class:
        last = layers[-1]
        if last.kind != "conv" or last.out_channels != 1:
            return False, "final layer must be a convolution with exactly 1 output channel (its bias is the centre)"
    return True, "Valid network config"


def validate_train_config(cfg: "TrainConfig") -> Tuple[bool, str]:
    if cfg.mode not in TRAIN_MODES:
        return False, f"mode: must be one of {', '.join(TRAIN_MODES)}"
    if cfg.gamma < 0 or not math.isfinite(cfg.gamma):
        return False, "gamma: must be a finite number >= 0"
    if not cfg.lr >= 0 or not math.isfinite(cfg.lr):
        return False, "lr: must be a finite number >= 0"
    if not 0 <= cfg.momentum < 1:
        return False, "momentum: must lie in [0, 1)"
    if cfg.weight_decay < 0:
        return False, "weight_decay: must be >= 0"
    if cfg.epochs < 1:
        return False, "epochs: must be >= 1"
    if cfg.batch_size < 2:
        return False, "batch_size: must be >= 2 (batchnorm)"
    if cfg.n_instances < 1:
        return False, "n_instances: must be >= 1"
    if cfg.skip_policy not in SKIP_POLICIES:
        return False, f"skip_policy: must be one of {', '.join(SKIP_POLICIES)}"
    if cfg.sigma is not None and not cfg.sigma > 0:
        return False, "sigma: must be > 0 when given"
    return True, "Valid train config"


def validate_synth_config(cfg: "SynthConfig") -> Tuple[bool, str]:
    counts = (cfg.n_normal, cfg.n_anomalous, cfg.n_test_normal, cfg.n_test_anomalous)
    if any(n < 0 for n in counts):
        return False, "sample counts must be >= 0"
    if cfg.channels < 1 or cfg.h < 1 or cfg.w < 1:
        return False, "channels, h and w must be >= 1"
    lo, hi = cfg.blob_sigma
    if not 0 < lo <= hi:
        return False, "blob_sigma must satisfy 0 < low <= high"
    if not cfg.amplitude > 0:
        return False, "amplitude must be > 0 (a zero bump makes anomalies indistinguishable from normals)"
    if cfg.smoothing < 0:
        return False, "smoothing must be >= 0"
    margin = math.ceil(3 * hi)
    if cfg.h <= 2 * margin or cfg.w <= 2 * margin:
        return False, f"blob sigma {hi} too large: a {cfg.h}x{cfg.w} image has no interior {margin} pixels from every border"
    return True, "Valid synth config"


def validate_box_fields(fields: Sequence[str]) -> Tuple[bool, str]:
    if len(fields) != 6:
        return False, f"expected 6 fields 'class cx cy w h conf', got {len(fields)}"
    try:
        class_id = int(fields[0])
        values = [float(v) for v in fields[1:]]
    except ValueError:
        return False, "fields must be an integer class followed by five decimals"
    if class_id < 0:
        return False, "class id must be >= 0"
    for name, v in zip(("cx", "cy", "w", "h", "conf"), values):
        if not 0.0 <= v <= 1.0:
            return False, f"{name}={v} outside [0, 1]"
    return True, "Valid box"


def validate_config_document(doc: dict) -> Tuple[bool, str]:
    """Field-level checks on the JSON config; the message starts with the dotted path."""
    expected = {
        "network.preset": ("desk", "paper"),
        "train.mode": TRAIN_MODES,
        "train.skip_policy": SKIP_POLICIES,
        "train.preset": ("desk", "paper"),
        "eval.criterion": CRITERIA,
    }
    for path, allowed in expected.items():
        section, key = path.split(".")
        value = doc.get(section, {}).get(key)
        if value not in allowed:
            return False, f"{path}: {value!r} is not one of {', '.join(map(str, allowed))}"

    positive_ints = ["train.epochs", "train.n_instances", "train.batch_size"]
    for path in positive_ints:
        section, key = path.split(".")
        value = doc[section].get(key)
        if value is not None and (not isinstance(value, int) or isinstance(value, bool) or value < 1):
            return False, f"{path}: must be a positive integer, got {value!r}"
    if doc["train"].get("batch_size") is not None and doc["train"]["batch_size"] < 2:
        return False, "train.batch_size: must be >= 2 (batchnorm)"

    for path in ("train.lr", "train.momentum", "train.weight_decay", "train.gamma"):
        section, key = path.split(".")
        value = doc[section].get(key)
        if value is not None and (not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0):
            return False, f"{path}: must be a number >= 0, got {value!r}"

    sigma = doc["train"].get("sigma")
    if sigma is not None and (not isinstance(sigma, (int, float)) or sigma <= 0):
        return False, f"train.sigma: must be null or a number > 0, got {sigma!r}"

    shape = doc["network"].get("input_shape")
    if shape is not None and (not isinstance(shape, list) or len(shape) != 3
                              or not all(isinstance(d, int) and d >= 1 for d in shape)):
        return False, f"network.input_shape: must be [c, h, w] of positive integers, got {shape!r}"

    for path in ("synth.n_normal", "synth.n_anomalous", "synth.n_test_normal", "synth.n_test_anomalous"):
        section, key = path.split(".")
        value = doc[section].get(key)
        if not isinstance(value, int) or value < 0:
            return False, f"{path}: must be an integer >= 0, got {value!r}"
    return True, "Valid config"
