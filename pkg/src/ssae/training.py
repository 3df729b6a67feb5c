"""Stage-wise training with a one-hot loss weighting, Adam and early stopping."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DivergenceError, ParameterError, SequencingError
from .models import EncoderDecoder, ModelConfig, ScaleSpaceModel, build_model, check_matched_complexity
from .optim import AdamState, adam_step
from .pyramid import build_pyramid, level_images, upsample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    patience: int = 10
    min_delta: float = 1e-3  # relative
    max_epochs: int = 200
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 0 or self.max_epochs < 1:
            raise ParameterError("patience must be >= 0 and max_epochs >= 1")
        if not 0 < self.val_fraction < 1:
            raise ParameterError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        return cls(**(d or {}))


@dataclass
class StageReport:
    stage: int
    lambdas: list[float]
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)  # round 0 is before any update
    best_val: float = math.inf
    best_round: int = 0
    stopped_epoch: int = 0


@dataclass
class TrainReport:
    stage_order: list[int] = field(default_factory=list)
    stages: list[StageReport] = field(default_factory=list)
    final_val_loss: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["final_val_loss"] = {str(k): v for k, v in self.final_val_loss.items()}
        return d


def one_hot_lambdas(levels: int, stage: int) -> list[float]:
    return [1.0 if k == stage else 0.0 for k in range(levels + 1)]


def weighted_total(level_losses, lambdas) -> float:
    """Weighted sum of per-level losses."""
    return float(sum(lam * loss for lam, loss in zip(lambdas, level_losses)))


def split_indices(n: int, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/validation split; at least one image on each side."""
    if n < 2:
        raise ParameterError(f"need at least 2 images to hold out a validation split, got {n}")
    perm = np.random.default_rng([config.seed, 7]).permutation(n)
    n_val = min(n - 1, max(1, int(round(n * config.val_fraction))))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# -- losses ----------------------------------------------------------------


def _forward_tensor(net, inputs: np.ndarray, rng=None) -> tuple[Tensor, Tensor | None]:
    if isinstance(net, EncoderDecoder):
        return net.forward(Tensor(inputs[..., None]), rng=rng)
    if net is None:
        return Tensor(inputs[..., None]), None
    return Tensor(np.asarray(net(inputs))[..., None]), None


def _stage_loss(net, inputs, targets, rng=None) -> Tensor:
    out, kl = _forward_tensor(net, inputs, rng)
    loss = ad.mse(out, Tensor(targets[..., None]))
    if kl is not None:
        loss = ad.add(loss, ad.mul(kl, net.config.kl_weight))
    return loss


def _frozen_upsampled(model: ScaleSpaceModel, pyr_highs, base, k) -> np.ndarray:
    """u(Î_{k+1}) from the frozen stages k+1..K."""
    from .models import apply_level_model

    recon = apply_level_model(model.base_model, base)
    for j in range(model.levels - 1, k, -1):
        recon = upsample(recon) + apply_level_model(model.band_models[j], pyr_highs[j])
    return upsample(recon)


def stage_data(model: ScaleSpaceModel, images: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Network inputs and targets for stage ``k``.

    Stage K maps I_K to itself; stage k < K maps H_k to I_k - u(Î_{k+1}),
    so that mse(net(H_k), target) == mse(I_k, u(Î_{k+1}) + net(H_k)).
    """
    if not 0 <= k <= model.levels:
        raise ParameterError(f"stage {k} outside 0..{model.levels}")
    missing = [j for j in range(k + 1, model.levels + 1) if j not in model.trained]
    if missing:
        raise SequencingError(f"stage {k} needs trained lower stages, missing {missing}")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    pyr = build_pyramid(images, model.levels, model.kernel)
    if k == model.levels:
        return pyr.base, pyr.base
    imgs = level_images(images, model.levels, model.kernel)
    return pyr.highs[k], imgs[k] - _frozen_upsampled(model, pyr.highs, pyr.base, k)


def level_loss(model: ScaleSpaceModel, x, k: int, rng=None) -> Tensor:
    """L_k = mse(I_k, u(Î_{k+1}) + M_k(H_k)), plus the KL term for variational stages."""
    inputs, targets = stage_data(model, x, k)
    return _stage_loss(model.stage_model(k), inputs, targets, rng)


# -- optimization loop -----------------------------------------------------


def _eval_loss(net, inputs, targets, batch=64) -> float:
    """Mean per-image stage loss, without sampling."""
    total = 0.0
    with ad.no_grad():
        for s in range(0, len(inputs), batch):
            chunk = slice(s, s + batch)
            out, kl = _forward_tensor(net, inputs[chunk])
            n = len(out.values)
            total += float(np.mean((out.values[..., 0] - targets[chunk]) ** 2)) * n
            if kl is not None:
                total += net.config.kl_weight * float(kl.values) * n
    return total / len(inputs)


def fit(net: EncoderDecoder, inputs, targets, config: TrainConfig, stage: int, lambdas, rng_key=0) -> StageReport:
    """Adam on mse(net(inputs), targets) with early stopping on a held-out split.

    Best-validation parameters are restored at the end.
    """
    if len(inputs) == 0:
        raise ParameterError("empty dataset")
    train_idx, val_idx = split_indices(len(inputs), config)
    rng = np.random.default_rng([config.seed, rng_key, stage])
    sample_rng = rng if net.variant == "variational" else None
    state = AdamState(lr=config.lr)
    report = StageReport(stage=stage, lambdas=list(lambdas))

    val_in, val_tg = inputs[val_idx], targets[val_idx]
    best = _eval_loss(net, val_in, val_tg)
    report.val_loss.append(best)
    report.best_val = best
    best_state = net.state_dict()
    reference, wait = best, 0
    for epoch in range(1, config.max_epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        running, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss = _stage_loss(net, inputs[idx], targets[idx], sample_rng)
            value = float(loss.values)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss {value} at stage {stage}, epoch {epoch}, batch {b}; "
                    f"lr={config.lr}, last train loss={report.train_loss[-1:] or None}"
                )
            ad.backward(loss)
            adam_step(state, net.params)
            running += value * len(idx)
            seen += len(idx)
        report.train_loss.append(running / seen)
        val = _eval_loss(net, val_in, val_tg)
        report.val_loss.append(val)
        report.stopped_epoch = epoch
        if val < report.best_val:
            report.best_val, report.best_round = val, epoch
            best_state = net.state_dict()
        if val < reference * (1.0 - config.min_delta):
            reference, wait = val, 0
        else:
            wait += 1
            if wait > config.patience:
                break
        log.debug("stage %d epoch %d train %.3e val %.3e", stage, epoch, report.train_loss[-1], val)
    net.load_state_dict(best_state)
    log.info("stage %d stopped at epoch %d, best val %.4e (round %d)", stage, report.stopped_epoch, report.best_val, report.best_round)
    return report


def train_stage(model: ScaleSpaceModel, dataset, k: int, config: TrainConfig) -> StageReport:
    net = model.stage_model(k)
    if not isinstance(net, EncoderDecoder):
        raise ParameterError(f"stage {k} has no trainable network")
    inputs, targets = stage_data(model, dataset, k)
    report = fit(net, inputs, targets, config, stage=k, lambdas=one_hot_lambdas(model.levels, k), rng_key=1)
    model.trained.add(k)
    return report


def evaluate_levels(model: ScaleSpaceModel, dataset, config: TrainConfig) -> dict[int, float]:
    """Validation L_k for every trained stage, on the same split training used."""
    _, val_idx = split_indices(len(dataset), config)
    val = np.asarray(dataset)[val_idx]
    out = {}
    for k in range(model.levels, -1, -1):
        if k not in model.trained:
            break
        inputs, targets = stage_data(model, val, k)
        out[k] = _eval_loss(model.stage_model(k), inputs, targets)
    return out


def train_all(
    model: ScaleSpaceModel,
    dataset,
    config: TrainConfig,
    stop_after: int | None = None,
    on_stage_end: Callable[[int, ScaleSpaceModel], None] | None = None,
) -> TrainReport:
    """Train stages K, K-1, ..., 0 in turn.

    ``stop_after`` ends the schedule early; ``on_stage_end(k, model)`` runs
    after each stage is trained and frozen.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if len(dataset) == 0:
        raise ParameterError("empty dataset")
    report = TrainReport()
    first = model.levels if model.model_base else model.levels - 1
    if not model.model_base:
        model.trained.add(model.levels)
    for k in range(first, -1, -1):
        report.stage_order.append(k)
        report.stages.append(train_stage(model, dataset, k, config))
        if on_stage_end is not None:
            on_stage_end(k, model)
        if stop_after is not None and k == stop_after:
            break
    report.final_val_loss = evaluate_levels(model, dataset, config)
    return report


def train_baseline_ae(
    variant: str,
    dataset,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    seed: int = 0,
    match: ScaleSpaceModel | None = None,
) -> tuple[EncoderDecoder, StageReport]:
    """Plain autoencoder trained on mse(x, M(x)) at the dataset's resolution."""
    dataset = np.asarray(dataset, dtype=np.float64)
    if len(dataset) == 0:
        raise ParameterError("empty dataset")
    net = build_model(variant, dataset.shape[-1], model_config, seed=seed)
    if match is not None:
        for other in match.networks().values():
            check_matched_complexity([net.parameter_count, other.parameter_count])
    report = fit(net, dataset, dataset, config, stage=0, lambdas=[1.0], rng_key=2)
    return net, report
