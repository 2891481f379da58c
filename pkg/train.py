"""
Training loop for the NSP model.

Adaptive moments with decoupled weight decay, a one-cycle learning-rate
schedule, global-norm gradient clipping and best-validation snapshotting.
Every random draw comes from a stream derived from the master seed, so a run
is a pure function of (config, seed, data).
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

import tensor as T
from gridio import SampleFrame, gauge_arrays, pair_consecutive
from nsp import NSPModel, decode, encode, frame_inputs, reparameterize, sde_step
from objective import (
    LossBreakdown,
    LossWeights,
    delta_penalty,
    gauge_nll,
    girsanov_loss,
    logspace_mse,
    match_variance,
    prior_kl,
    temporal_term,
    total_loss,
    transition_kl,
)
from sampler import SplitConfig, split_context_target
from tensor import Tensor
from utils import logger
from utils.errors import ConfigError, DivergenceError, DomainError, SampleRejected
from utils.seeding import make_rng

LOSS_CURVE_COLUMNS = ["step", "lr", "rec", "ctx", "prior", "trans", "delta", "total"]


@dataclass
class TrainConfig:
    peak_lr: float = 3e-3
    weight_decay: float = 1.35e-3
    epochs: int = 4
    batch_size: int = 4
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 42
    warmup: float = 0.3
    start_div: float = 25.0
    final_div: float = 1e4
    max_steps: Optional[int] = None
    # objective switches
    use_trans: bool = True
    use_prior: bool = True
    use_ctx: bool = True
    temporal: str = "kl"
    matched_variance: bool = False
    reconstruction: str = "nll"
    sampled_transition: bool = False

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be at least 1")
        if not 0.0 <= self.warmup <= 1.0:
            raise ConfigError(f"warmup must lie in [0, 1], got {self.warmup}")
        if self.reconstruction not in ("nll", "logspace_mse"):
            raise ConfigError(f"unknown reconstruction loss {self.reconstruction!r}")
        temporal_term(self.temporal)

    def lr_at(self, step: int, total_steps: int) -> float:
        return one_cycle_lr(step, total_steps, self.peak_lr, self.warmup, self.start_div, self.final_div)

    def effective_weights(self, weights: LossWeights) -> LossWeights:
        return LossWeights(
            beta_kl=weights.beta_kl if self.use_prior else 0.0,
            beta_sde=weights.beta_sde if self.use_trans else 0.0,
            beta_ctx=weights.beta_ctx if self.use_ctx else 0.0,
            beta_delta=weights.beta_delta,
        )


# ---------------------------------------------------------------------------
# optimizer pieces


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict) -> "AdamWState":
        return cls(0, {n: np.zeros_like(p.data) for n, p in params.items()}, {n: np.zeros_like(p.data) for n, p in params.items()})


def optimizer_step(params: dict, state: AdamWState, lr: float, cfg: TrainConfig) -> None:
    """
    One AdamW update in place.

    Decay p <- p * (1 - lr * wd) comes first, then the bias-corrected
    moment step. Parameters without a gradient are left alone.

    Raises:
        DomainError: A gradient holds NaN or inf (the message names the parameter)
    """
    state.step += 1
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DomainError(f"non-finite gradient for parameter {name}")
        if cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def one_cycle_lr(step: int, total_steps: int, peak: float, warmup: float = 0.3,
                 start_div: float = 25.0, final_div: float = 1e4) -> float:
    """
    Cosine warmup from peak/start_div to peak over the first ``warmup``
    fraction of steps, then cosine annealing down to peak/final_div.
    """
    if total_steps <= 0:
        return peak
    step = min(max(step, 0), total_steps)
    start, end = peak / start_div, peak / final_div
    warm_steps = warmup * total_steps

    def _cos(a: float, b: float, pct: float) -> float:
        return b + (a - b) * 0.5 * (1.0 + math.cos(math.pi * pct))

    if step <= warm_steps and warm_steps > 0:
        return _cos(start, peak, step / warm_steps)
    return _cos(peak, end, (step - warm_steps) / (total_steps - warm_steps))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# losses per training item


@dataclass
class FrameTerms:
    post: object
    rec: Tensor
    ctx: Tensor
    prior: Tensor
    delta: Tensor


def _subset(frame: SampleFrame, indices) -> tuple:
    return gauge_arrays([frame.gauges[i] for i in indices])


def frame_terms(frame: SampleFrame, model: NSPModel, split_cfg: SplitConfig, cfg: TrainConfig,
                rng: np.random.Generator) -> FrameTerms:
    """
    Encode one frame on a fresh context/target split and score the decoder.

    Raises:
        SampleRejected: The frame has too few rainy targets
    """
    split = split_context_target(frame.gauges, split_cfg, rng)
    x, sat_raw = frame_inputs(frame, split.context)
    post = encode(x, model)
    if model.cfg.deterministic_latent:
        z = post.mean
    else:
        z = reparameterize(post, rng.standard_normal(post.mean.shape))
    pred = decode(z, x[0], x[1], model, sat_raw)

    reconstruct = logspace_mse if cfg.reconstruction == "logspace_mse" else gauge_nll
    rows, cols, values = _subset(frame, split.target)
    rec = reconstruct(pred, rows, cols, values) if len(values) else Tensor(0.0)
    rows, cols, values = _subset(frame, split.context)
    ctx = reconstruct(pred, rows, cols, values) if len(values) else Tensor(0.0)
    return FrameTerms(post, rec, ctx, prior_kl(post), delta_penalty(pred.delta))


def transition_term(post_t, post_next, model: NSPModel, cfg: TrainConfig, rng: np.random.Generator,
                    record: Optional[dict] = None) -> Tensor:
    """
    Temporal term between consecutive posteriors.

    z_t is detached: the posterior mean by default, a detached sample when
    ``sampled_transition`` is set. Under ``matched_variance`` the drift
    matching value is also stored in ``record["girsanov"]`` when given.
    """
    if cfg.sampled_transition:
        z_t = reparameterize(post_t, rng.standard_normal(post_t.mean.shape)).detach()
    else:
        z_t = post_t.mean.detach()
    trans = sde_step(z_t, model)
    q_next = match_variance(post_next, trans) if cfg.matched_variance else post_next
    value = temporal_term(cfg.temporal)(q_next, trans)
    if cfg.matched_variance:
        with T.no_grad():
            drift = girsanov_loss(q_next, trans).item()
        if record is not None:
            record["girsanov"] = drift
        logger.debug(f"matched variance: trans {value.item():.6g}, girsanov {drift:.6g}")
    return value


def item_loss(item: tuple, frames: Sequence[SampleFrame], model: NSPModel, weights: LossWeights,
              split_cfg: SplitConfig, cfg: TrainConfig, rng: np.random.Generator) -> LossBreakdown:
    """
    Objective of one training item: a single frame index or a (t, t+1) pair.

    Per-frame terms are averaged over the frames of the item; the temporal
    term is added for pairs when enabled.
    """
    parts = [frame_terms(frames[i], model, split_cfg, cfg, rng) for i in item]
    n = float(len(parts))

    def _avg(name):
        acc = getattr(parts[0], name)
        for p in parts[1:]:
            acc = acc + getattr(p, name)
        return T.scale(acc, 1.0 / n)

    trans = None
    record = {}
    if len(parts) == 2 and cfg.use_trans:
        trans = transition_term(parts[0].post, parts[1].post, model, cfg, rng, record)
    out = total_loss(_avg("rec"), _avg("ctx"), _avg("prior"), trans, _avg("delta"), cfg.effective_weights(weights))
    if cfg.matched_variance:
        out.girsanov = record.get("girsanov", 0.0)
    return out


def build_items(frames: Sequence[SampleFrame]) -> list:
    """Consecutive pairs plus every frame that is in no pair, as index tuples."""
    pairs = pair_consecutive(frames)
    paired = {i for pair in pairs for i in pair}
    singles = [(i,) for i in range(len(frames)) if i not in paired]
    return [tuple(p) for p in pairs] + singles


def _mean_breakdown(parts: list) -> LossBreakdown:
    objective = parts[0].objective
    for p in parts[1:]:
        objective = objective + p.objective
    objective = T.scale(objective, 1.0 / len(parts))
    means = {k: float(np.mean([getattr(p, k) for p in parts])) for k in ("rec", "ctx", "prior", "trans", "delta")}
    if parts[0].girsanov is not None:
        means["girsanov"] = float(np.mean([p.girsanov for p in parts]))
    return LossBreakdown(total=objective.item(), objective=objective, **means)


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    history: list
    best_step: int = -1
    best_validation: Optional[float] = None
    steps: int = 0
    skipped: int = 0

    def loss_curve(self) -> pd.DataFrame:
        columns = list(LOSS_CURVE_COLUMNS)
        if self.history and "girsanov" in self.history[0]:
            columns.append("girsanov")
        return pd.DataFrame(self.history, columns=columns)


def write_loss_curve(path: str, result: FitResult) -> None:
    result.loss_curve().to_csv(path, index=False, lineterminator="\n", float_format="%.10g")


def validation_loss(frames: Sequence[SampleFrame], model: NSPModel, weights: LossWeights,
                    split_cfg: SplitConfig, cfg: TrainConfig) -> Optional[float]:
    """Mean objective over validation items with fixed per-item draws; None if every item is rejected."""
    model.eval()
    totals = []
    with T.no_grad():
        for k, item in enumerate(build_items(frames)):
            try:
                totals.append(item_loss(item, frames, model, weights, split_cfg, cfg, make_rng(cfg.seed, "validation", k)).total)
            except SampleRejected:
                continue
    return float(np.mean(totals)) if totals else None


def heldout_transition_kl(frames: Sequence[SampleFrame], model: NSPModel, sde_model: Optional[NSPModel] = None) -> Optional[float]:
    """
    Mean transition KL over consecutive frame pairs, every gauge as context.

    Posteriors come from ``model``; the latent SDE from ``sde_model`` (the
    model's own by default), so one encoder can be scored under another
    model's frozen dynamics. None when no consecutive pair exists.
    """
    sde_model = sde_model or model
    pairs = pair_consecutive(frames)
    if not pairs:
        return None
    model.eval()
    values = []
    with T.no_grad():
        for i, j in pairs:
            post_t = encode(frame_inputs(frames[i])[0], model)
            post_next = encode(frame_inputs(frames[j])[0], model)
            values.append(transition_kl(post_next, sde_step(post_t.mean, sde_model)).item())
    return float(np.mean(values))


def fit(
    train_frames: Sequence[SampleFrame],
    model: NSPModel,
    weights: Optional[LossWeights] = None,
    split_cfg: Optional[SplitConfig] = None,
    cfg: Optional[TrainConfig] = None,
    validation_frames: Sequence[SampleFrame] = (),
) -> FitResult:
    """
    Train ``model`` in place.

    Each epoch shuffles the training items (pairs and singles) and walks them
    in batches; per-item objectives are averaged, gradients clipped, and
    AdamW applied on the one-cycle schedule. When validation frames are given
    the parameters with the lowest validation loss are restored at the end.

    Returns:
        FitResult: Per-step loss curve and the best validation step

    Raises:
        DivergenceError: The loss becomes non-finite
    """
    weights = weights or LossWeights()
    split_cfg = split_cfg or SplitConfig()
    cfg = cfg or TrainConfig()
    train_frames = list(train_frames)
    items = build_items(train_frames)
    if not items:
        raise ConfigError("no training frames")

    steps_per_epoch = math.ceil(len(items) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    params = model.parameters()
    state = AdamWState.create(params)
    result = FitResult(history=[])
    best_state = None

    logger.info(
        f"training on {len(train_frames)} frames ({len(items)} items), "
        f"{total_steps} steps, {model.count_parameters()['total']} parameters"
    )
    step = 0
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, "order", epoch).permutation(len(items))
        for start in range(0, len(order), cfg.batch_size):
            if step >= total_steps:
                break
            model.train(make_rng(cfg.seed, "dropout", step))
            parts = []
            for k in order[start:start + cfg.batch_size]:
                try:
                    parts.append(item_loss(items[k], train_frames, model, weights, split_cfg, cfg, make_rng(cfg.seed, "step", step, int(k))))
                except SampleRejected:
                    result.skipped += 1
            lr = cfg.lr_at(step, total_steps)
            if not parts:
                step += 1
                continue
            batch = _mean_breakdown(parts)
            if not np.isfinite(batch.total):
                raise DivergenceError(step, batch.as_row())

            for p in params.values():
                p.grad = None
            T.backward(batch.objective)
            norm = clip_grad_norm(params.values(), cfg.clip_norm)
            optimizer_step(params, state, lr, cfg)
            result.history.append({"step": step, "lr": lr, **batch.as_row()})
            logger.debug(f"step {step}: total {batch.total:.4f} rec {batch.rec:.4f} trans {batch.trans:.4f} |g| {norm:.3f}")
            step += 1

        model.eval()
        last = result.history[-1]["total"] if result.history else float("nan")
        message = f"epoch {epoch + 1}/{cfg.epochs}: loss {last:.4f}"
        if validation_frames:
            val = validation_loss(validation_frames, model, weights, split_cfg, cfg)
            message += f", validation {val if val is None else round(val, 4)}"
            if val is not None and (result.best_validation is None or val < result.best_validation):
                result.best_validation = val
                result.best_step = step
                best_state = model.state_dict()
                message += " <<green>>(best)<<default>>"
        logger.info(message)
        if step >= total_steps:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    result.steps = step
    if result.skipped:
        logger.info(f"skipped {result.skipped} items with too few rainy targets")
    return result
