"""
Fully convolutional one-class network, its receptive-field geometry, the
convolutional autoencoder baseline, and the checkpoint format.

The final layer of a one-class network is a 1-channel convolution whose bias
plays the role of the hypersphere centre.
"""
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
from typing_extensions import Self

from .helpers import canonical_json
from .ndtensor import (LayerParams, Mode, Raster, as_raster, batchnorm_params, conv_params,
                       layer_backward, layer_forward)
from .validation import validate_network_layers, walk_shapes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"OCCM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    slope: float = 0.01

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        return cls(**data)


def conv(out_channels: int, kernel: int = 3, stride: int = 1, padding: Optional[int] = None) -> LayerSpec:
    pad = (kernel - 1) // 2 if padding is None else padding
    return LayerSpec("conv", out_channels=out_channels, kernel=kernel, stride=stride, padding=pad)


def bn() -> LayerSpec:
    return LayerSpec("batchnorm")


def lrelu(slope: float = 0.01) -> LayerSpec:
    return LayerSpec("leakyrelu", slope=slope)


def pool() -> LayerSpec:
    return LayerSpec("maxpool", kernel=2, stride=2)


def upsample() -> LayerSpec:
    return LayerSpec("upsample", kernel=1)


def fcdd_layers() -> tuple[LayerSpec, ...]:
    """Compact 4-conv backbone: total stride 4, so 64x64 -> 16x16 and 224x224 -> 56x56."""
    return (
        conv(16), bn(), lrelu(), pool(),
        conv(32), bn(), lrelu(), pool(),
        conv(64), lrelu(),
        conv(1, kernel=1),
    )


@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple[LayerSpec, ...] = field(default_factory=fcdd_layers)
    input_shape: tuple[int, int, int] = (3, 64, 64)
    seed: int = 0
    # centre = bias of the final conv; frozen at 0 when False
    train_centre: bool = True

    def to_dict(self) -> dict:
        return {
            "layers": [spec.to_dict() for spec in self.layers],
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "train_centre": self.train_centre,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        return cls(
            layers=tuple(LayerSpec.from_dict(d) for d in data["layers"]),
            input_shape=tuple(data["input_shape"]),
            seed=int(data.get("seed", 0)),
            train_centre=bool(data.get("train_centre", True)),
        )


def desk_config(seed: int = 0, **overrides) -> NetworkConfig:
    return replace(NetworkConfig(seed=seed), **overrides)


def paper_config(seed: int = 0, **overrides) -> NetworkConfig:
    return replace(NetworkConfig(input_shape=(3, 224, 224), seed=seed), **overrides)


@dataclass(frozen=True)
class ReceptiveField:
    stride: int
    offset: float
    size: int

    def centre(self, i: int) -> float:
        """Full-resolution coordinate (pixel index units) of low-res cell i."""
        return self.offset + i * self.stride


class Parameter(NamedTuple):
    name: str
    value: np.ndarray
    grad: np.ndarray
    decay: bool


@dataclass
class Network:
    layers: list[LayerParams]
    input_shape: tuple[int, int, int]
    output_shape: tuple[int, int, int]
    config: Optional[NetworkConfig] = None
    train_centre: bool = True

    @property
    def centre(self) -> float:
        return float(self.layers[-1].bias[0])

    def parameters(self) -> list[Parameter]:
        """Trainable arrays in declaration order.

        Weight decay is off for batchnorm scale/shift and for the centre bias.
        """
        params = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                params.append(Parameter(f"{i}.conv.weight", layer.weights, layer.grad_weights, True))
                is_centre = self.config is not None and i == last
                if is_centre and not self.train_centre:
                    continue
                params.append(Parameter(f"{i}.conv.bias", layer.bias, layer.grad_bias, not is_centre))
            elif layer.kind == "batchnorm":
                params.append(Parameter(f"{i}.bn.scale", layer.weights, layer.grad_weights, False))
                params.append(Parameter(f"{i}.bn.shift", layer.bias, layer.grad_bias, False))
        return params

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def state_arrays(self) -> list[np.ndarray]:
        """Everything a checkpoint stores, in declaration order."""
        arrays = []
        for layer in self.layers:
            if layer.kind == "conv":
                arrays += [layer.weights, layer.bias]
            elif layer.kind == "batchnorm":
                arrays += [layer.weights, layer.bias, layer.running_mean, layer.running_var]
        return arrays


@dataclass
class ForwardCache:
    mode: str
    network_id: int
    caches: list = field(default_factory=list)
    grad_input: Optional[Raster] = None


def _kaiming_bound(fan_in: int, slope: float) -> float:
    return math.sqrt(6.0 / ((1.0 + slope ** 2) * fan_in))


def _init_layers(specs: Sequence[LayerSpec], input_shape: Sequence[int], rng: np.random.Generator) -> list[LayerParams]:
    layers = []
    c = int(input_shape[0])
    for i, spec in enumerate(specs):
        if spec.kind == "conv":
            # gain follows the next activation's slope when there is one
            slope = next((s.slope for s in specs[i + 1:] if s.kind == "leakyrelu"), 0.01)
            bound = _kaiming_bound(c * spec.kernel * spec.kernel, slope)
            weights = rng.uniform(-bound, bound, size=(spec.out_channels, c, spec.kernel, spec.kernel))
            layers.append(conv_params(weights, np.zeros(spec.out_channels), spec.stride, spec.padding))
            c = spec.out_channels
        elif spec.kind == "batchnorm":
            layers.append(batchnorm_params(c))
        elif spec.kind == "leakyrelu":
            layers.append(LayerParams("leakyrelu", slope=spec.slope))
        elif spec.kind == "maxpool":
            layers.append(LayerParams("maxpool", stride=2))
        elif spec.kind == "upsample":
            layers.append(LayerParams("upsample"))
    return layers


def build_network(config: NetworkConfig) -> Network:
    """Kaiming-uniform conv weights, zero biases (centre included), batchnorm scale 1 shift 0."""
    ok, msg = validate_network_layers(config.layers, config.input_shape, one_class=True)
    if not ok:
        raise ValueError(msg)
    _, _, out_shape = walk_shapes(config.layers, config.input_shape)
    rng = np.random.default_rng(config.seed)
    layers = _init_layers(config.layers, config.input_shape, rng)
    logger.debug("built one-class network: input %s -> features %s", config.input_shape, out_shape)
    return Network(layers, tuple(config.input_shape), out_shape, config, config.train_centre)


def _run_forward(layers: list[LayerParams], x: Raster, mode: Mode, cache: ForwardCache) -> Raster:
    for layer in layers:
        x, layer_cache = layer_forward(layer, x, mode)
        cache.caches.append(layer_cache)
    return x


def _run_backward(layers: list[LayerParams], caches: list, grad: Raster) -> Raster:
    for layer, layer_cache in zip(reversed(layers), reversed(caches)):
        grad = layer_backward(layer, layer_cache, grad)
    return grad


def forward(net: Network, batch: Raster, mode: Mode = "eval") -> tuple[Raster, ForwardCache]:
    """Features z of shape (n, 1, u, v) and the cache needed by backward."""
    batch = as_raster(batch)
    if tuple(batch.shape[1:]) != tuple(net.input_shape):
        raise ValueError(f"batch shape {batch.shape[1:]} does not match network input {net.input_shape}")
    cache = ForwardCache(mode, id(net))
    z = _run_forward(net.layers, batch, mode, cache)
    return z, cache


def backward(net: Network, cache: Optional[ForwardCache], grad_z: Raster) -> dict[str, np.ndarray]:
    """Accumulate gradients of <grad_z, z> into the parameter grad buffers.

    Returns the buffers by parameter name; cache.grad_input receives the input gradient.
    """
    if cache is None or not cache.caches:
        raise ValueError("backward needs the cache of a matching forward call")
    if cache.network_id != id(net) or len(cache.caches) != len(net.layers):
        raise ValueError("cache was produced by a different network")
    cache.grad_input = _run_backward(net.layers, cache.caches, as_raster(grad_z))
    return {p.name: p.grad for p in net.parameters()}


def receptive_field(config: Union[NetworkConfig, Sequence[LayerSpec]]) -> ReceptiveField:
    """Cumulative stride, centre offset and size of one output cell's receptive field."""
    specs = config.layers if isinstance(config, NetworkConfig) else config
    stride, size, offset = 1, 1, 0.0
    for spec in specs:
        if spec.kind in ("conv", "maxpool"):
            k = spec.kernel if spec.kind == "conv" else 2
            s = spec.stride if spec.kind == "conv" else 2
            p = spec.padding if spec.kind == "conv" else 0
            size += (k - 1) * stride
            offset += ((k - 1) / 2 - p) * stride
            stride *= s
        elif spec.kind == "upsample":
            raise ValueError("receptive field is undefined for upsampling layers")
    return ReceptiveField(stride, offset, size)


# --- autoencoder baseline ---

def ae_encoder_layers() -> tuple[LayerSpec, ...]:
    return (conv(16), bn(), lrelu(), pool(), conv(32), bn(), lrelu(), pool())


def ae_decoder_layers(channels: int = 3) -> tuple[LayerSpec, ...]:
    return (upsample(), conv(16), bn(), lrelu(), upsample(), conv(channels))


@dataclass(frozen=True)
class AutoencoderConfig:
    encoder: tuple[LayerSpec, ...] = field(default_factory=ae_encoder_layers)
    decoder: tuple[LayerSpec, ...] = field(default_factory=ae_decoder_layers)
    input_shape: tuple[int, int, int] = (3, 64, 64)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "encoder": [s.to_dict() for s in self.encoder],
            "decoder": [s.to_dict() for s in self.decoder],
            "input_shape": list(self.input_shape),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        return cls(
            encoder=tuple(LayerSpec.from_dict(d) for d in data["encoder"]),
            decoder=tuple(LayerSpec.from_dict(d) for d in data["decoder"]),
            input_shape=tuple(data["input_shape"]),
            seed=int(data.get("seed", 0)),
        )


def default_autoencoder_config(input_shape: Sequence[int] = (3, 64, 64), seed: int = 0) -> AutoencoderConfig:
    return AutoencoderConfig(decoder=ae_decoder_layers(int(input_shape[0])), input_shape=tuple(input_shape), seed=seed)


@dataclass
class Autoencoder:
    encoder: Network
    decoder: Network
    config: AutoencoderConfig

    def parameters(self) -> list[Parameter]:
        return ([p._replace(name="enc." + p.name) for p in self.encoder.parameters()]
                + [p._replace(name="dec." + p.name) for p in self.decoder.parameters()])

    def zero_grad(self) -> None:
        self.encoder.zero_grad()
        self.decoder.zero_grad()

    def state_arrays(self) -> list[np.ndarray]:
        return self.encoder.state_arrays() + self.decoder.state_arrays()


def build_autoencoder(config: AutoencoderConfig) -> Autoencoder:
    """Encoder and a spatially mirrored decoder (nearest-neighbour upsample + conv stages)."""
    ok, msg = validate_network_layers(config.encoder, config.input_shape, one_class=False)
    if not ok:
        raise ValueError(f"encoder: {msg}")
    _, _, code_shape = walk_shapes(config.encoder, config.input_shape)
    ok, msg = validate_network_layers(config.decoder, code_shape, one_class=False)
    if not ok:
        raise ValueError(f"decoder: {msg}")
    _, _, recon_shape = walk_shapes(config.decoder, code_shape)
    if tuple(recon_shape) != tuple(config.input_shape):
        raise ValueError(f"reconstruction shape {recon_shape} differs from input shape {tuple(config.input_shape)}")
    rng = np.random.default_rng(config.seed)
    encoder = Network(_init_layers(config.encoder, config.input_shape, rng), tuple(config.input_shape), code_shape)
    decoder = Network(_init_layers(config.decoder, code_shape, rng), code_shape, recon_shape)
    return Autoencoder(encoder, decoder, config)


def ae_forward(ae: Autoencoder, batch: Raster, mode: Mode = "eval") -> tuple[Raster, tuple[ForwardCache, ForwardCache]]:
    code, enc_cache = forward(ae.encoder, batch, mode)
    recon, dec_cache = forward(ae.decoder, code, mode)
    if recon.shape != batch.shape:
        raise ValueError(f"reconstruction shape {recon.shape} differs from input shape {batch.shape}")
    return recon, (enc_cache, dec_cache)


def ae_backward(ae: Autoencoder, caches: tuple[ForwardCache, ForwardCache], grad_recon: Raster) -> None:
    enc_cache, dec_cache = caches
    backward(ae.decoder, dec_cache, grad_recon)
    backward(ae.encoder, enc_cache, dec_cache.grad_input)


def ae_scores(ae: Autoencoder, batch: Raster) -> np.ndarray:
    """Per-sample mean squared reconstruction error (eval mode); higher = more anomalous."""
    batch = as_raster(batch)
    recon, _ = ae_forward(ae, batch, "eval")
    return ((batch - recon) ** 2).reshape(batch.shape[0], -1).mean(axis=1)


def ae_score(ae: Autoencoder, image: Raster) -> float:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    return float(ae_scores(ae, image)[0])


# --- checkpoints ---

def save_checkpoint(path: str, model: Union[Network, Autoencoder], extra: Optional[dict] = None) -> None:
    """OCCM magic, u32 version, u32-length canonical JSON block, then u32 tensor count and
    each tensor as u32 ndim, u32 dims and little-endian float64 data."""
    if isinstance(model, Autoencoder):
        header = {"kind": "autoencoder", "config": model.config.to_dict()}
    else:
        if model.config is None:
            raise ValueError("only networks built from a NetworkConfig can be checkpointed")
        header = {"kind": "fcdd", "config": model.config.to_dict()}
    header["extra"] = extra or {}
    text = canonical_json(header).encode("utf-8")
    arrays = model.state_arrays()
    try:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
            f.write(text)
            f.write(struct.pack("<I", len(arrays)))
            for arr in arrays:
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path: str) -> tuple[Union[Network, Autoencoder], dict]:
    """Inverse of save_checkpoint; returns the model and the extra metadata block."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    try:
        header, arrays = _parse_checkpoint(blob, path)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({e})") from e

    if header["kind"] == "autoencoder":
        model = build_autoencoder(AutoencoderConfig.from_dict(header["config"]))
    elif header["kind"] == "fcdd":
        model = build_network(NetworkConfig.from_dict(header["config"]))
    else:
        raise ValueError(f"{path}: unknown model kind {header['kind']!r}")
    _restore(model, arrays, path)
    return model, header.get("extra", {})


def _parse_checkpoint(blob: bytes, path: str) -> tuple[dict, list[np.ndarray]]:
    version, n_text = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    if pos + n_text > len(blob):
        raise ValueError(f"{path}: truncated checkpoint header")
    header = json.loads(blob[pos:pos + n_text].decode("utf-8"))
    pos += n_text
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = []
    for i in range(count):
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + n_bytes > len(blob):
            raise ValueError(f"{path}: truncated checkpoint (tensor {i} needs {n_bytes} bytes)")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=n_bytes // 8, offset=pos).reshape(shape).astype(np.float64))
        pos += n_bytes
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes after the last tensor")
    return header, arrays


def _restore(model: Union[Network, Autoencoder], arrays: list[np.ndarray], path: str) -> None:
    nets = [model.encoder, model.decoder] if isinstance(model, Autoencoder) else [model]
    expected = sum(len(n.state_arrays()) for n in nets)
    if expected != len(arrays):
        raise ValueError(f"{path}: expected {expected} tensors, found {len(arrays)}")
    targets = [a for net in nets for a in net.state_arrays()]
    for i, (target, arr) in enumerate(zip(targets, arrays)):
        if target.shape != arr.shape:
            raise ValueError(f"{path}: tensor {i} has shape {arr.shape}, the network expects {target.shape}")
    it = iter(arrays)
    for net in nets:
        for layer in net.layers:
            if layer.kind == "conv":
                layer.weights[...] = next(it)
                layer.bias[...] = next(it)
            elif layer.kind == "batchnorm":
                layer.weights[...] = next(it)
                layer.bias[...] = next(it)
                layer.running_mean = next(it).copy()
                layer.running_var = next(it).copy()
