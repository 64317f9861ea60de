"""
SGD training for the FCDD regimes and the autoencoder baseline.

Each experiment trains `n_instances` independent models with seeds
base_seed, base_seed + 1, ... Training is strictly sequential within an
instance, so a fixed seed, config and dataset reproduce parameters and logs
bit for bit.
"""
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
from tqdm import tqdm

from .data import DatasetSplit, Sample, stack_batch
from .heatmap import GaussianUpsampler, default_sigma, huber_map
from .helpers import append_jsonl, make_log_entry
from .losses import (LossOutput, fcdd_focal_loss, fcdd_ss_loss_modified, fcdd_ss_loss_original,
                     fcdd_unsup_loss, pseudo_huber_grad)
from .model import (Autoencoder, AutoencoderConfig, Network, NetworkConfig, Parameter, ae_backward,
                    ae_forward, backward, build_autoencoder, build_network, forward, receptive_field,
                    save_checkpoint)
from .validation import validate_train_config

logger = logging.getLogger(__name__)

UNSUPERVISED_MODES = ("unsup_no_anom", "unsup_with_anom")
SEMI_SUPERVISED_MODES = ("ss_original", "ss_modified", "ss_focal")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "unsup_no_anom"
    gamma: float = 0.0
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-6
    epochs: int = 200
    batch_size: int = 128
    n_instances: int = 5
    base_seed: int = 0
    skip_policy: str = "error"
    sigma: Optional[float] = None
    hflip: bool = False
    log_path: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    progress: bool = False


def paper_train_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(), **overrides)


def desk_train_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(batch_size=32, epochs=60), **overrides)


class NonFiniteBatchError(RuntimeError):
    """A batch produced a non-finite loss under skip_policy='error'."""

    def __init__(self, report: dict):
        self.report = report
        super().__init__(
            f"non-finite loss in instance {report['instance']}, epoch {report['epoch']}, "
            f"batch {report['batch']} ({len(report['sample_ids'])} offending samples)")


@dataclass
class TrainLog:
    instance: int
    seed: int
    epoch_losses: list[Optional[float]] = field(default_factory=list)
    nonfinite_batches: list[int] = field(default_factory=list)
    seconds: float = 0.0
    checkpoint_path: Optional[str] = None


@dataclass
class TrainedInstance:
    model: Union[Network, Autoencoder]
    log: TrainLog


# --- optimizer ---

def sgd_step(params: list[Parameter], state: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> None:
    """v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.

    Decay is skipped for parameters flagged decay=False (batchnorm scale/shift, centre bias).
    Non-finite gradients are rejected before anything is touched.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise ValueError(f"non-finite gradient in {p.name}")
        if p.value.shape != p.grad.shape:
            raise ValueError(f"{p.name}: gradient shape {p.grad.shape} differs from {p.value.shape}")
    for p in params:
        v = state.get(p.name)
        if v is None:
            v = state[p.name] = np.zeros_like(p.value)
        v *= momentum
        v += p.grad
        if p.decay and weight_decay:
            v += weight_decay * p.value
        p.value[...] -= lr * v


# --- batch streams ---

def training_samples(split: DatasetSplit, mode: str) -> list[Sample]:
    """Samples a mode trains on; semi-supervised modes require every anomaly to carry a map."""
    if mode == "unsup_no_anom":
        return [s for s in split.train if s.label == 0]
    samples = list(split.train)
    if mode in SEMI_SUPERVISED_MODES:
        missing = [s.id for s in samples if s.gt_map is None]
        if missing:
            raise ValueError(f"{mode} needs ground-truth maps; missing for {len(missing)} samples: "
                             + ", ".join(missing[:10]))
    return samples


def epoch_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    """Seeded shuffle cut into batches; a trailing batch of one sample is dropped (batchnorm)."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


def _flip(rng: np.random.Generator, x: np.ndarray, maps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flip = rng.random(x.shape[0]) < 0.5
    x, maps = x.copy(), maps.copy()
    x[flip] = x[flip][..., ::-1]
    maps[flip] = maps[flip][..., ::-1]
    return x, maps


def batch_loss(mode: str, z: np.ndarray, labels: np.ndarray, maps: np.ndarray,
               upsampler: Optional[GaussianUpsampler], gamma: float = 0.0) -> tuple[LossOutput, np.ndarray]:
    """Loss of one batch of features and its gradient wrt the features z.

    Semi-supervised losses act on the full-resolution heatmap, so their
    gradient flows back through the (linear) upsampling and pseudo-Huber map.
    """
    if mode in UNSUPERVISED_MODES:
        out = fcdd_unsup_loss(z, labels)
        return out, out.grad
    heatmap = upsampler(huber_map(z))
    if mode == "ss_original":
        out = fcdd_ss_loss_original(heatmap, maps)
    elif mode == "ss_modified":
        out = fcdd_ss_loss_modified(heatmap, maps)
    elif mode == "ss_focal":
        out = fcdd_focal_loss(heatmap, maps, gamma)
    else:
        raise ValueError(f"unknown training mode {mode!r}")
    if not out.finite:
        return out, out.grad
    return out, upsampler.backward(out.grad) * pseudo_huber_grad(z)


# --- training loops ---

def _log_epoch(cfg: TrainConfig, log: TrainLog, epoch: int, mean_loss, nonfinite: int, seconds: float,
               action: str = "train_epoch") -> None:
    log.epoch_losses.append(mean_loss)
    log.nonfinite_batches.append(nonfinite)
    if cfg.log_path:
        entry = make_log_entry(action, nonfinite == 0, None if nonfinite == 0 else "non-finite batches skipped",
                               instance=log.instance, epoch=epoch, mean_loss=mean_loss,
                               nonfinite_batches=nonfinite, seconds=round(seconds, 6))
        append_jsonl(cfg.log_path, entry)


def _run_epochs(cfg: TrainConfig, log: TrainLog, params: Callable[[], list[Parameter]],
                step_fn: Callable[[np.ndarray, int, int], Optional[float]], n: int,
                rng: np.random.Generator, action: str) -> None:
    """Shared epoch loop: shuffle, per-batch step, skip-policy bookkeeping, logging."""
    state: dict[str, np.ndarray] = {}
    epochs = range(cfg.epochs)
    if cfg.progress:
        epochs = tqdm(epochs, desc=f"instance {log.instance}", unit="epoch")
    started = time.perf_counter()
    for epoch in epochs:
        t0 = time.perf_counter()
        losses, nonfinite = [], 0
        for b, idx in enumerate(epoch_batches(rng, n, cfg.batch_size)):
            value = step_fn(idx, epoch, b)
            if value is None:
                nonfinite += 1
                continue
            try:
                sgd_step(params(), state, cfg.lr, cfg.momentum, cfg.weight_decay)
            except ValueError as e:
                if cfg.skip_policy == "error":
                    raise NonFiniteBatchError({"instance": log.instance, "epoch": epoch, "batch": b,
                                               "sample_ids": [], "reason": str(e)}) from e
                nonfinite += 1
                continue
            losses.append(value)
        mean_loss = float(np.mean(losses)) if losses else None
        _log_epoch(cfg, log, epoch, mean_loss, nonfinite, time.perf_counter() - t0, action)
        logger.debug("instance %d epoch %d: loss %s, %d non-finite batches", log.instance, epoch, mean_loss, nonfinite)
    log.seconds = time.perf_counter() - started


def _checkpoint(cfg: TrainConfig, log: TrainLog, model, extra: dict, prefix: str = "instance") -> None:
    if not cfg.checkpoint_dir:
        return
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    path = os.path.join(cfg.checkpoint_dir, f"{prefix}_{log.instance}.occm")
    save_checkpoint(path, model, extra)
    log.checkpoint_path = path


def _check_config(cfg: TrainConfig) -> None:
    ok, msg = validate_train_config(cfg)
    if not ok:
        raise ValueError(msg)


def train(split: DatasetSplit, netcfg: NetworkConfig, traincfg: TrainConfig) -> list[TrainedInstance]:
    """Train traincfg.n_instances one-class networks in the configured regime."""
    _check_config(traincfg)
    samples = training_samples(split, traincfg.mode)
    if len(samples) < 2:
        raise ValueError(f"{traincfg.mode} needs at least 2 training samples, got {len(samples)}")
    x_all, labels_all, maps_all = stack_batch(samples, split, netcfg.input_shape)
    ids = [s.id for s in samples]

    rf = receptive_field(netcfg)
    sigma = traincfg.sigma if traincfg.sigma is not None else default_sigma(rf)
    logger.info("training %d x %s on %d samples (rf stride %d, size %d, sigma %.3f)",
                traincfg.n_instances, traincfg.mode, len(samples), rf.stride, rf.size, sigma)

    results = []
    for k in range(traincfg.n_instances):
        seed = traincfg.base_seed + k
        net = build_network(replace(netcfg, seed=seed))
        upsampler = None
        if traincfg.mode in SEMI_SUPERVISED_MODES:
            upsampler = GaussianUpsampler(rf, sigma, net.output_shape[1:], net.input_shape[1:])
        rng = np.random.default_rng(seed)
        log = TrainLog(k, seed)

        def step(idx: np.ndarray, epoch: int, b: int) -> Optional[float]:
            x, maps = x_all[idx], maps_all[idx]
            if traincfg.hflip:
                x, maps = _flip(rng, x, maps)
            net.zero_grad()
            z, cache = forward(net, x, "train")
            out, grad_z = batch_loss(traincfg.mode, z, labels_all[idx], maps, upsampler, traincfg.gamma)
            if not out.finite:
                bad = [ids[i] for i, flag in zip(idx, out.nonfinite) if flag]
                report = {"instance": log.instance, "epoch": epoch, "batch": b, "mode": traincfg.mode,
                          "sample_ids": bad}
                if traincfg.skip_policy == "error":
                    raise NonFiniteBatchError(report)
                logger.warning("skipping non-finite batch %d of epoch %d (%d samples)", b, epoch, len(bad))
                return None
            backward(net, cache, grad_z)
            return out.value

        _run_epochs(traincfg, log, net.parameters, step, len(samples), rng, "train_epoch")
        _checkpoint(traincfg, log, net, {
            "mode": traincfg.mode, "gamma": traincfg.gamma, "sigma": sigma, "seed": seed,
            "channel_mean": [float(v) for v in split.channel_mean],
            "channel_std": [float(v) for v in split.channel_std],
        })
        results.append(TrainedInstance(net, log))
    return results


def train_autoencoder(split: DatasetSplit, aecfg: AutoencoderConfig, traincfg: TrainConfig) -> list[TrainedInstance]:
    """Train autoencoders on normal samples only, minimising mean squared reconstruction error."""
    _check_config(traincfg)
    if traincfg.mode != "unsup_no_anom":
        raise ValueError(f"the autoencoder trains on normal samples only (mode unsup_no_anom), got {traincfg.mode}")
    anomalous = [s.id for s in split.train if s.label == 1]
    if anomalous:
        raise ValueError(f"autoencoder training stream contains {len(anomalous)} anomalous samples "
                         f"(e.g. {anomalous[0]}); filter them out first")
    samples = list(split.train)
    if len(samples) < 2:
        raise ValueError(f"autoencoder needs at least 2 training samples, got {len(samples)}")
    x_all, _, _ = stack_batch(samples, split, aecfg.input_shape)

    results = []
    for k in range(traincfg.n_instances):
        seed = traincfg.base_seed + k
        ae = build_autoencoder(replace(aecfg, seed=seed))
        rng = np.random.default_rng(seed)
        log = TrainLog(k, seed)

        def step(idx: np.ndarray, epoch: int, b: int) -> Optional[float]:
            x = x_all[idx]
            ae.zero_grad()
            recon, caches = ae_forward(ae, x, "train")
            diff = recon - x
            ae_backward(ae, caches, 2.0 * diff / diff.size)
            return float((diff ** 2).mean())

        _run_epochs(traincfg, log, ae.parameters, step, len(samples), rng, "train_ae_epoch")
        _checkpoint(traincfg, log, ae, {
            "mode": "autoencoder", "seed": seed,
            "channel_mean": [float(v) for v in split.channel_mean],
            "channel_std": [float(v) for v in split.channel_std],
        }, prefix="ae")
        results.append(TrainedInstance(ae, log))
    return results


def normal_only(split: DatasetSplit) -> DatasetSplit:
    """Same split with anomalous training samples removed (for the autoencoder)."""
    return replace(split, train=[s for s in split.train if s.label == 0], missing_ground_truth=[])
