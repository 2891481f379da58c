"""
Context/target partitioning of gauge observations for training.
"""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gridio import GaugeObservation
from utils.errors import ConfigError, SampleRejected
from utils.seeding import make_rng


@dataclass
class SplitConfig:
    context_ratio: float = 0.5
    min_context: int = 500
    max_context: int = 10000
    min_rainy_targets: int = 16
    rain_threshold: float = 0.5
    desk_scale: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.context_ratio < 1.0:
            raise ConfigError(f"context_ratio must lie in (0, 1), got {self.context_ratio}")
        if self.min_context > self.max_context:
            raise ConfigError("min_context must not exceed max_context")
        if self.desk_scale <= 0:
            raise ConfigError(f"desk_scale must be positive, got {self.desk_scale}")

    def _scaled(self, count: int) -> int:
        return int(math.ceil(count / self.desk_scale))

    @property
    def context_bounds(self) -> tuple:
        return self._scaled(self.min_context), self._scaled(self.max_context)

    @property
    def rainy_target_floor(self) -> int:
        return self._scaled(self.min_rainy_targets)


@dataclass(frozen=True)
class ContextTargetSplit:
    context: tuple
    target: tuple

    def __len__(self) -> int:
        return len(self.context) + len(self.target)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_context_target(gauges: Sequence[GaugeObservation], cfg: SplitConfig, rng: np.random.Generator) -> ContextTargetSplit:
    """
    Split valid gauges into context and target sets.

    Rainy and dry observations are split separately at ``context_ratio`` so
    both sets keep the rainy proportion. The context size is then pulled into
    the configured bounds by moving dry observations across (rainy ones only
    when no dry ones remain, never dropping the target below the rainy floor).

    Args:
        gauges: Quality-filtered observations of one frame
        cfg: Split settings
        rng: Generator owned by this frame

    Returns:
        ContextTargetSplit: Index lists into ``gauges``

    Raises:
        SampleRejected: Fewer than the rainy-target floor remain in the target set
    """
    valid = [i for i, g in enumerate(gauges) if not g.is_missing]
    rainy = [i for i in valid if gauges[i].value >= cfg.rain_threshold]
    dry = [i for i in valid if gauges[i].value < cfg.rain_threshold]

    rainy = [rainy[k] for k in rng.permutation(len(rainy))]
    dry = [dry[k] for k in rng.permutation(len(dry))]
    n_rc = _round_half_up(cfg.context_ratio * len(rainy))
    n_dc = _round_half_up(cfg.context_ratio * len(dry))
    ctx_rainy, tgt_rainy = rainy[:n_rc], rainy[n_rc:]
    ctx_dry, tgt_dry = dry[:n_dc], dry[n_dc:]

    low, high = cfg.context_bounds
    floor = cfg.rainy_target_floor
    # too many: demote dry context first, then rainy
    while len(ctx_rainy) + len(ctx_dry) > high:
        if ctx_dry:
            tgt_dry.append(ctx_dry.pop())
        else:
            tgt_rainy.append(ctx_rainy.pop())
    # too few: promote dry targets, then rainy ones above the floor; best effort
    while len(ctx_rainy) + len(ctx_dry) < low:
        if tgt_dry:
            ctx_dry.append(tgt_dry.pop())
        elif len(tgt_rainy) > floor:
            ctx_rainy.append(tgt_rainy.pop())
        else:
            break

    if len(tgt_rainy) < floor:
        raise SampleRejected(f"only {len(tgt_rainy)} rainy targets, need {floor}")
    return ContextTargetSplit(tuple(sorted(ctx_rainy + ctx_dry)), tuple(sorted(tgt_rainy + tgt_dry)))


def all_context(gauges: Sequence[GaugeObservation]) -> ContextTargetSplit:
    """Every valid observation as context; used at inference."""
    return ContextTargetSplit(tuple(i for i, g in enumerate(gauges) if not g.is_missing), ())


def frame_rng(master: int, timestamp: int) -> np.random.Generator:
    return make_rng(master, "split", timestamp)
