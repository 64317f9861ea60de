"""
Finite-difference gradient suite: every layer, every loss, and the full
network-plus-upsampling path of each training regime, each on a number of
random instances.

Leaky ReLU and max pooling are only piecewise smooth. Composite instances are
redrawn until every pre-activation and every pool runner-up sits at least
KINK_MARGIN away from a switch, so a central difference never straddles a kink.

A conv bias feeding train-mode batchnorm is cancelled by the batch mean: its
gradient is exactly zero, so it is checked by the size of its analytic gradient
instead of a relative error against finite-difference roundoff.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .heatmap import GaussianUpsampler, default_sigma
from .losses import (bce_loss, fcdd_focal_loss, fcdd_ss_loss_modified, fcdd_ss_loss_original, fcdd_unsup_loss,
                     hsc_loss)
from .model import (AutoencoderConfig, Network, NetworkConfig, ae_backward, ae_forward, backward, bn,
                    build_autoencoder, build_network, conv, forward, lrelu, pool, receptive_field, upsample)
from .ndtensor import (LayerParams, batchnorm, batchnorm_grad, batchnorm_params, conv2d, conv2d_grad, conv_params,
                       grad_check, layer_forward, leaky_relu, leaky_relu_grad, maxpool2, maxpool2_grad, upsample2,
                       upsample2_grad)
from .trainer import batch_loss

logger = logging.getLogger(__name__)

KINK_MARGIN = 1e-3
MAX_REDRAWS = 200


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    instances: int
    passed: bool


CheckFn = Callable[[np.random.Generator, float], float]


# --- layers: scalar = <G, layer(x)> for a fixed random G ---

def _check_conv(rng: np.random.Generator, eps: float) -> float:
    x = rng.standard_normal((2, 3, 7, 7))
    params = conv_params(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4), stride=2, padding=1)
    g = rng.standard_normal(conv2d(x, params).shape)
    gx, gw, gb = conv2d_grad(x, params, g)
    return grad_check(lambda: float((g * conv2d(x, params)).sum()),
                      [(x, gx), (params.weights, gw), (params.bias, gb)], eps)


def _check_batchnorm(mode: str) -> CheckFn:
    def check(rng: np.random.Generator, eps: float) -> float:
        x = rng.standard_normal((4, 3, 3, 3)) * 2.0 + 0.5
        params = batchnorm_params(3)
        params.weights[:] = rng.uniform(0.5, 1.5, 3)
        params.bias[:] = rng.standard_normal(3)
        params.running_mean = rng.standard_normal(3)
        params.running_var = rng.uniform(0.5, 2.0, 3)
        frozen = (params.running_mean.copy(), params.running_var.copy())

        def f() -> float:
            params.running_mean, params.running_var = frozen[0].copy(), frozen[1].copy()
            out, _ = batchnorm(x, params, mode)
            return float((g * out).sum())

        out, cache = batchnorm(x, params, mode)
        g = rng.standard_normal(out.shape)
        gx, gs, gb = batchnorm_grad(cache, params, g)
        return grad_check(f, [(x, gx), (params.weights, gs), (params.bias, gb)], eps)

    return check


def _check_leaky_relu(rng: np.random.Generator, eps: float) -> float:
    x = rng.choice([-1.0, 1.0], size=(2, 3, 4, 4)) * rng.uniform(0.1, 2.0, size=(2, 3, 4, 4))
    slope = float(rng.uniform(0.0, 0.5))
    g = rng.standard_normal(x.shape)
    return grad_check(lambda: float((g * leaky_relu(x, slope)).sum()), [(x, leaky_relu_grad(x, slope, g))], eps)


def _check_maxpool(rng: np.random.Generator, eps: float) -> float:
    # distinct values 0.01 apart keep every window's winner stable under perturbation
    x = (rng.permutation(2 * 2 * 6 * 6) * 0.01).reshape(2, 2, 6, 6).astype(np.float64)
    out, argmax = maxpool2(x)
    g = rng.standard_normal(out.shape)
    return grad_check(lambda: float((g * maxpool2(x)[0]).sum()), [(x, maxpool2_grad(argmax, g))], eps)


def _check_upsample(rng: np.random.Generator, eps: float) -> float:
    x = rng.standard_normal((2, 2, 3, 3))
    g = rng.standard_normal((2, 2, 6, 6))
    return grad_check(lambda: float((g * upsample2(x)).sum()), [(x, upsample2_grad(g))], eps)


# --- losses: scalar = loss value ---

def _anomaly_maps(rng: np.random.Generator, shape: tuple, every_sample: bool = False) -> np.ndarray:
    maps = (rng.random(shape) < 0.3).astype(np.float64)
    if every_sample:
        maps.reshape(shape[0], -1)[:, 0] = 1.0
    return maps


def _check_hsc(rng: np.random.Generator, eps: float) -> float:
    f = rng.standard_normal((5, 4))
    c = rng.standard_normal(4)
    y = np.array([0, 1, 0, 1, 1])
    out = hsc_loss(f, c, y)
    return grad_check(lambda: hsc_loss(f, c, y).value, [(f, out.grad)], eps)


def _check_unsup(rng: np.random.Generator, eps: float) -> float:
    z = rng.standard_normal((3, 1, 4, 4))
    y = np.array([0, 1, 0])
    return grad_check(lambda: fcdd_unsup_loss(z, y).value, [(z, fcdd_unsup_loss(z, y).grad)], eps)


def _heatmap(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.05, 3.0, size=(3, 1, 4, 4))


def _check_ss_original(rng: np.random.Generator, eps: float) -> float:
    h = _heatmap(rng)
    y = _anomaly_maps(rng, h.shape, every_sample=True)
    return grad_check(lambda: fcdd_ss_loss_original(h, y).value, [(h, fcdd_ss_loss_original(h, y).grad)], eps)


def _check_bce(rng: np.random.Generator, eps: float) -> float:
    p = rng.uniform(0.05, 0.95, size=(3, 1, 4, 4))
    y = _anomaly_maps(rng, p.shape)
    return grad_check(lambda: bce_loss(p, y).value, [(p, bce_loss(p, y).grad)], eps)


def _check_ss_modified(rng: np.random.Generator, eps: float) -> float:
    h = _heatmap(rng)
    y = _anomaly_maps(rng, h.shape)
    return grad_check(lambda: fcdd_ss_loss_modified(h, y).value, [(h, fcdd_ss_loss_modified(h, y).grad)], eps)


def _check_focal(rng: np.random.Generator, eps: float) -> float:
    h = _heatmap(rng)
    y = _anomaly_maps(rng, h.shape)
    gamma = float(rng.uniform(0.0, 2.0))
    return grad_check(lambda: fcdd_focal_loss(h, y, gamma).value, [(h, fcdd_focal_loss(h, y, gamma).grad)], eps)


# --- composites: network (+ upsampling) + loss, gradients wrt every parameter ---

TINY_INPUT = (3, 8, 8)


def tiny_layers() -> tuple:
    return (conv(4), bn(), lrelu(0.1), pool(), conv(4), lrelu(0.1), conv(1, kernel=1))


def kink_margin(layers: list[LayerParams], x: np.ndarray) -> float:
    """Smallest distance of any leaky-ReLU input from 0 or any pool window's winner from its runner-up."""
    margin = np.inf
    for layer in layers:
        if layer.kind == "leakyrelu":
            margin = min(margin, float(np.abs(x).min()))
        elif layer.kind == "maxpool":
            n, c, h, w = x.shape
            win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
            top = np.sort(win, axis=-1)
            margin = min(margin, float((top[..., 3] - top[..., 2]).min()))
        x, _ = layer_forward(layer, x, "train")
    return margin


def _smooth_instance(rng: np.random.Generator, build: Callable[[int], tuple]) -> tuple:
    for _ in range(MAX_REDRAWS):
        seed = int(rng.integers(2 ** 31))
        instance = build(seed)
        if instance[-1] >= KINK_MARGIN:
            return instance[:-1]
    raise RuntimeError(f"no instance with kink margin >= {KINK_MARGIN} in {MAX_REDRAWS} draws")


def bn_cancelled_biases(layers: Sequence[LayerParams], prefix: str = "") -> set[str]:
    """Names of conv biases followed directly by batchnorm."""
    return {f"{prefix}{i}.conv.bias" for i in range(len(layers) - 1)
            if layers[i].kind == "conv" and layers[i + 1].kind == "batchnorm"}


def check_parameters(func: Callable[[], float], params: Sequence, cancelled: set[str], eps: float) -> float:
    checked = [(p.value, p.grad.copy()) for p in params if p.name not in cancelled]
    residual = max((float(np.abs(p.grad).max()) for p in params if p.name in cancelled), default=0.0)
    return max(grad_check(func, checked, eps), residual)


def _randomize_network(net: Network, rng: np.random.Generator) -> None:
    for layer in net.layers:
        if layer.kind == "batchnorm":
            layer.weights[:] = rng.uniform(0.5, 1.5, layer.weights.shape)
            layer.bias[:] = rng.standard_normal(layer.bias.shape) * 0.1
        elif layer.kind == "conv":
            layer.bias[:] = rng.standard_normal(layer.bias.shape) * 0.1


def _composite(mode: str) -> CheckFn:
    def check(rng: np.random.Generator, eps: float) -> float:
        def build(seed: int) -> tuple:
            local = np.random.default_rng(seed)
            net = build_network(NetworkConfig(layers=tiny_layers(), input_shape=TINY_INPUT, seed=seed))
            _randomize_network(net, local)
            x = local.standard_normal((3,) + TINY_INPUT)
            return net, x, local, kink_margin(net.layers, x)

        net, x, local = _smooth_instance(rng, build)
        labels = np.array([0.0, 1.0, 1.0])
        maps = _anomaly_maps(local, (3, 1) + TINY_INPUT[1:], every_sample=(mode == "ss_original"))
        if mode != "ss_original":
            maps[0] = 0.0
        gamma = float(local.uniform(0.0, 2.0))
        rf = receptive_field(net.config)
        up = GaussianUpsampler(rf, default_sigma(rf), net.output_shape[1:], TINY_INPUT[1:])

        def f() -> float:
            z, _ = forward(net, x, "train")
            return batch_loss(mode, z, labels, maps, up, gamma)[0].value

        net.zero_grad()
        z, cache = forward(net, x, "train")
        out, grad_z = batch_loss(mode, z, labels, maps, up, gamma)
        backward(net, cache, grad_z)
        return check_parameters(f, net.parameters(), bn_cancelled_biases(net.layers), eps)

    return check


def _check_autoencoder(rng: np.random.Generator, eps: float) -> float:
    def build(seed: int) -> tuple:
        cfg = AutoencoderConfig(encoder=(conv(4), bn(), lrelu(0.1), pool()),
                                decoder=(upsample(), conv(3)), input_shape=TINY_INPUT, seed=seed)
        ae = build_autoencoder(cfg)
        x = np.random.default_rng(seed).standard_normal((2,) + TINY_INPUT)
        return ae, x, kink_margin(ae.encoder.layers + ae.decoder.layers, x)

    ae, x = _smooth_instance(rng, build)

    def f() -> float:
        recon, _ = ae_forward(ae, x, "train")
        return float(((recon - x) ** 2).mean())

    ae.zero_grad()
    recon, caches = ae_forward(ae, x, "train")
    ae_backward(ae, caches, 2.0 * (recon - x) / x.size)
    cancelled = bn_cancelled_biases(ae.encoder.layers, "enc.") | bn_cancelled_biases(ae.decoder.layers, "dec.")
    return check_parameters(f, ae.parameters(), cancelled, eps)


CHECKS: dict[str, CheckFn] = {
    "conv2d": _check_conv,
    "batchnorm_train": _check_batchnorm("train"),
    "batchnorm_eval": _check_batchnorm("eval"),
    "leaky_relu": _check_leaky_relu,
    "maxpool2": _check_maxpool,
    "upsample2": _check_upsample,
    "hsc_loss": _check_hsc,
    "fcdd_unsup_loss": _check_unsup,
    "fcdd_ss_loss_original": _check_ss_original,
    "bce_loss": _check_bce,
    "fcdd_ss_loss_modified": _check_ss_modified,
    "fcdd_focal_loss": _check_focal,
    "network+unsup_with_anom": _composite("unsup_with_anom"),
    "network+ss_original": _composite("ss_original"),
    "network+ss_modified": _composite("ss_modified"),
    "network+ss_focal": _composite("ss_focal"),
    "autoencoder+mse": _check_autoencoder,
}


def run_gradcheck_suite(n_instances: int = 20, eps: float = 1e-5, tol: float = 1e-4, seed: int = 0,
                        names: Sequence[str] = ()) -> list[GradCheckResult]:
    """Run each check on n_instances random instances; a check passes iff its worst error < tol."""
    results = []
    for k, (name, check) in enumerate(CHECKS.items()):
        if names and name not in names:
            continue
        rng = np.random.default_rng([seed, k])
        worst = max(check(rng, eps) for _ in range(n_instances))
        results.append(GradCheckResult(name, worst, n_instances, worst < tol))
        logger.debug("%s: max relative error %.3e over %d instances", name, worst, n_instances)
    return results
