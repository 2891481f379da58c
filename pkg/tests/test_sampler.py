import pytest

from gridio import NODATA, GaugeObservation
from sampler import SplitConfig, all_context, frame_rng, split_context_target
from utils.errors import ConfigError, SampleRejected


def _gauges(n_rainy=40, n_dry=60, n_missing=0):
    values = [2.0] * n_rainy + [0.0] * n_dry + [NODATA] * n_missing
    return [GaugeObservation(0, 0, 0.0, 0.0, v, f"s{i}") for i, v in enumerate(values)]


def _loose(**overrides):
    values = dict(context_ratio=0.5, min_context=1, max_context=1000, min_rainy_targets=1)
    values.update(overrides)
    return SplitConfig(**values)


def _rainy(gauges, indices):
    return sum(1 for i in indices if gauges[i].value >= 0.5)


@pytest.mark.fast
class TestSplitConfig:
    """Validation and desk scaling."""

    def test_ratio_bounds(self) -> None:
        with pytest.raises(ConfigError):
            SplitConfig(context_ratio=1.0)
        with pytest.raises(ConfigError):
            SplitConfig(context_ratio=0.0)

    def test_min_above_max(self) -> None:
        with pytest.raises(ConfigError):
            SplitConfig(min_context=20, max_context=10)

    def test_desk_scale_divides_counts(self) -> None:
        cfg = SplitConfig(desk_scale=20)
        assert cfg.context_bounds == (25, 500)
        assert cfg.rainy_target_floor == 1


@pytest.mark.fast
class TestSplit:
    """Stratified context/target partitioning."""

    def test_stratified_proportions(self) -> None:
        gauges = _gauges()
        split = split_context_target(gauges, _loose(), frame_rng(0, 0))
        assert len(split.context) == 50
        assert _rainy(gauges, split.context) == 20
        assert _rainy(gauges, split.target) == 20

    def test_partition_of_valid_gauges(self) -> None:
        gauges = _gauges(n_missing=5)
        split = split_context_target(gauges, _loose(), frame_rng(0, 1))
        assert not set(split.context) & set(split.target)
        assert set(split.context) | set(split.target) == set(range(100))
        assert len(split) == 100

    def test_max_context_demotes_dry_first(self) -> None:
        gauges = _gauges()
        split = split_context_target(gauges, _loose(max_context=30), frame_rng(0, 2))
        assert len(split.context) == 30
        assert _rainy(gauges, split.context) == 20

    def test_min_context_promotes_dry_targets(self) -> None:
        gauges = _gauges()
        split = split_context_target(gauges, _loose(min_context=80), frame_rng(0, 3))
        assert len(split.context) == 80
        assert _rainy(gauges, split.target) == 20

    def test_min_context_keeps_rainy_floor(self) -> None:
        """Promotion stops short of starving the rainy targets."""
        gauges = _gauges(n_rainy=40, n_dry=0)
        split = split_context_target(gauges, _loose(min_context=1000, min_rainy_targets=16), frame_rng(0, 4))
        assert _rainy(gauges, split.target) == 16
        assert len(split.context) == 24

    def test_too_few_rainy_targets_rejected(self) -> None:
        with pytest.raises(SampleRejected):
            split_context_target(_gauges(n_rainy=10), _loose(min_rainy_targets=16), frame_rng(0, 5))

    def test_deterministic_per_frame(self) -> None:
        gauges = _gauges()
        a = split_context_target(gauges, _loose(), frame_rng(7, 12))
        b = split_context_target(gauges, _loose(), frame_rng(7, 12))
        c = split_context_target(gauges, _loose(), frame_rng(7, 13))
        assert a == b
        assert a != c

    def test_all_context_skips_missing(self) -> None:
        split = all_context(_gauges(n_rainy=2, n_dry=1, n_missing=2))
        assert split.context == (0, 1, 2)
        assert split.target == ()
