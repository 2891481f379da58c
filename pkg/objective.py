"""
Loss terms of the NSP variational objective.

All terms return scalar Tensors so they can be summed and back-propagated
together. KL terms are normalized by the number of latent coordinates so the
loss weights keep their meaning across grid sizes.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

import tensor as T
from nsp import LatentPosterior, Prediction, TransitionGaussian
from tensor import Tensor
from utils.errors import ConfigError, ContractError, EmptyReductionError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)
REDUCTIONS = ("mean", "sum", "none")


@dataclass
class LossWeights:
    beta_kl: float = 0.5
    beta_sde: float = 0.01
    beta_ctx: float = 15.0
    beta_delta: float = 90.0

    def __post_init__(self) -> None:
        for name in ("beta_kl", "beta_sde", "beta_ctx", "beta_delta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")


@dataclass
class LossBreakdown:
    rec: float
    ctx: float
    prior: float
    trans: float
    delta: float
    total: float
    objective: Optional[Tensor] = None
    girsanov: Optional[float] = None

    def as_row(self) -> dict:
        row = {k: getattr(self, k) for k in ("rec", "ctx", "prior", "trans", "delta", "total")}
        if self.girsanov is not None:
            row["girsanov"] = self.girsanov
        return row


def _reduce(per_coord: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return T.mean_all(per_coord)
    if reduction == "sum":
        return T.sum_all(per_coord)
    if reduction == "none":
        return per_coord
    raise ContractError(f"unknown reduction {reduction!r}; expected one of {REDUCTIONS}")


def _check_same_shape(*tensors: Tensor) -> None:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"operands differ in shape: {sorted(shapes)}")


# ---------------------------------------------------------------------------
# reconstruction


def gaussian_nll(mean: Tensor, log_var: Tensor, targets, mask=None, reduction: str = "mean") -> Tensor:
    """
    Heteroscedastic Gaussian negative log-likelihood.

    Per entry: 0.5 * (log 2pi + log_var + (y - mean)^2 / exp(log_var)),
    averaged (or summed) over the entries selected by ``mask``.

    Raises:
        EmptyReductionError: ``mask`` selects nothing under a mean reduction
    """
    targets = T.as_tensor(np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=mean.dtype))
    _check_same_shape(mean, log_var, targets)
    inv_var = T.exp(T.scale(log_var, -1.0))
    per_entry = T.scale(log_var + T.mul(T.square(targets - mean), inv_var) + LOG_2PI, 0.5)
    if mask is None:
        if reduction == "mean" and per_entry.size == 0:
            raise EmptyReductionError("gaussian_nll over zero observations")
        return _reduce(per_entry, reduction)
    if reduction == "none":
        return T.mul(per_entry, Tensor(np.asarray(mask, dtype=mean.dtype)))
    return T.masked_reduce(per_entry, mask, reduction)


def gauge_nll(pred: Prediction, rows, cols, values, reduction: str = "mean") -> Tensor:
    """NLL of the prediction at gauge cells; one entry per observation."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        if reduction == "mean":
            raise EmptyReductionError("gauge_nll over an empty gauge set")
        return Tensor(0.0)
    mean = T.take_cells(pred.y_hat, rows, cols)
    log_var = T.take_cells(pred.log_var_y, rows, cols)
    return gaussian_nll(mean, log_var, np.asarray(values, dtype=np.float64), reduction=reduction)


def logspace_mse(pred: Prediction, rows, cols, values, reduction: str = "mean") -> Tensor:
    """Squared error between log1p(y_hat) and log1p(y) at gauge cells; the variance head is ignored."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        if reduction == "mean":
            raise EmptyReductionError("logspace_mse over an empty gauge set")
        return Tensor(0.0)
    gathered = T.log1p(T.take_cells(pred.y_hat, rows, cols))
    targets = Tensor(np.log1p(np.asarray(values, dtype=np.float64)), dtype=gathered.dtype)
    return _reduce(T.square(gathered - targets), reduction)


# ---------------------------------------------------------------------------
# latent regularizers


def prior_kl(post: LatentPosterior, reduction: str = "mean") -> Tensor:
    """KL(q || N(0, I)) per coordinate: 0.5 * (var + mean^2 - 1 - log_var)."""
    per_coord = T.scale(T.exp(post.log_var) + T.square(post.mean) - 1.0 - post.log_var, 0.5)
    return _reduce(per_coord, reduction)


def transition_kl(q_next: LatentPosterior, trans: TransitionGaussian, reduction: str = "mean") -> Tensor:
    """
    Closed-form KL(q(z_{t+1}) || p(z_{t+1} | z_t)) between diagonal Gaussians.

    Per coordinate:
        0.5 * (log(var_p / var_q) + (var_q + (mu_q - mean_p)^2) / var_p - 1)

    The caller is responsible for detaching z_t inside ``trans``.
    """
    _check_same_shape(q_next.mean, trans.mean)
    inv_p = T.reciprocal(trans.var)
    diff2 = T.square(q_next.mean - trans.mean)
    per_coord = T.scale(
        T.log(trans.var) - q_next.log_var + T.mul(T.exp(q_next.log_var) + diff2, inv_p) - 1.0,
        0.5,
    )
    return _reduce(per_coord, reduction)


def girsanov_loss(q_next: LatentPosterior, trans: TransitionGaussian, reduction: str = "mean") -> Tensor:
    """Drift matching term 0.5 * (mu_q - mean_p)^2 / var_p, the KL under matched variances."""
    _check_same_shape(q_next.mean, trans.mean)
    per_coord = T.scale(T.mul(T.square(q_next.mean - trans.mean), T.reciprocal(trans.var)), 0.5)
    return _reduce(per_coord, reduction)


def naive_temporal_penalty(q_next: LatentPosterior, trans: TransitionGaussian, reduction: str = "mean") -> Tensor:
    """Mean-only temporal matching: 0.5 * (mu_q - mean_p)^2 with no variance weighting."""
    _check_same_shape(q_next.mean, trans.mean)
    return _reduce(T.scale(T.square(q_next.mean - trans.mean), 0.5), reduction)


def match_variance(q_next: LatentPosterior, trans: TransitionGaussian) -> LatentPosterior:
    """The posterior with its variance overwritten by the transition variance."""
    return LatentPosterior(q_next.mean, T.log(trans.var))


TEMPORAL_TERMS = {
    "kl": transition_kl,
    "girsanov": girsanov_loss,
    "naive": naive_temporal_penalty,
}


def temporal_term(kind: str):
    try:
        return TEMPORAL_TERMS[kind]
    except KeyError:
        raise ConfigError(f"unknown temporal objective {kind!r}; expected one of {sorted(TEMPORAL_TERMS)}") from None


def delta_penalty(delta: Tensor, reduction: str = "mean") -> Tensor:
    """Residual magnitude: mean of delta^2 over every grid cell."""
    return _reduce(T.square(delta), reduction)


# ---------------------------------------------------------------------------
# assembly


def total_loss(
    rec: Tensor,
    ctx: Tensor,
    prior: Tensor,
    trans: Optional[Tensor],
    delta: Tensor,
    weights: LossWeights,
) -> LossBreakdown:
    """
    rec + beta_ctx * ctx + beta_kl * prior + beta_sde * trans + beta_delta * delta.

    ``trans`` is None for an unpaired frame and then contributes zero.
    """
    terms = [T.as_tensor(t) for t in (rec, ctx, prior, delta)]
    rec, ctx, prior, delta = terms
    objective = rec + T.scale(ctx, weights.beta_ctx) + T.scale(prior, weights.beta_kl) + T.scale(delta, weights.beta_delta)
    trans_value = 0.0
    if trans is not None:
        trans = T.as_tensor(trans)
        objective = objective + T.scale(trans, weights.beta_sde)
        trans_value = trans.item()
    return LossBreakdown(
        rec=rec.item(),
        ctx=ctx.item(),
        prior=prior.item(),
        trans=trans_value,
        delta=delta.item(),
        total=objective.item(),
        objective=objective,
    )


def weighted_heldout_mse(pred, targets, rain_threshold: float = 0.5, weight: float = 5.0) -> float:
    """
    Weighted MSE over held-out gauges with weight ``weight`` on rainy targets.

    Raises:
        EmptyReductionError: Empty target set
    """
    pred = np.asarray(pred, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size == 0:
        raise EmptyReductionError("weighted_heldout_mse over an empty target set")
    if pred.shape != targets.shape:
        raise ShapeError(f"predictions {pred.shape} and targets {targets.shape} differ")
    w = np.where(targets >= rain_threshold, weight, 1.0)
    return float(np.sum(w * (pred - targets) ** 2) / np.sum(w))


def weighted_gauge_mse(field: Tensor, rows, cols, values, rain_threshold: float = 0.5, weight: float = 5.0) -> Tensor:
    """Differentiable weighted held-out MSE of a (1, 1, H, W) field at gauge cells."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptyReductionError("weighted_gauge_mse over an empty target set")
    w = np.where(values >= rain_threshold, weight, 1.0)
    gathered = T.take_cells(field, rows, cols)
    err2 = T.square(gathered - Tensor(values, dtype=gathered.dtype))
    return T.scale(T.sum_all(T.mul(err2, Tensor(w, dtype=gathered.dtype))), 1.0 / float(w.sum()))
