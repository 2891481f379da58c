import numpy as np
import pytest

import tensor as T
from gridio import GaugeObservation, GridField, GridSpec, SampleFrame
from nsp import (
    STANDARD,
    InferenceMode,
    NSPConfig,
    NSPModel,
    decode,
    encode,
    frame_inputs,
    infer,
    infer_ensemble,
    load_checkpoint,
    refine,
    reparameterize,
    save_checkpoint,
    sde_step,
)
from objective import gauge_nll, prior_kl
from tensor import Tensor
from utils.errors import ConfigError, ContractError, DomainError, FormatError, ShapeError


def _tiny_config(**overrides):
    values = dict(
        channels=2,
        downsample=2,
        hidden=4,
        encoder_stages=1,
        encoder_blocks=1,
        decoder_stages=1,
        decoder_blocks=1,
        decoder_hidden=4,
        fusion_blocks=1,
        sde_hidden=4,
        dropout=0.0,
    )
    values.update(overrides)
    return NSPConfig(**values)


def _frame(h=5, w=7, seed=0, timestamp=0):
    rng = np.random.default_rng(seed)
    spec = GridSpec(h, w, origin=(40.0, -100.0), resolution_deg=0.1)
    sat = GridField.from_array(spec, rng.gamma(0.5, 2.0, size=(h, w)))
    elev = GridField.from_array(spec, rng.uniform(0, 1500, size=(h, w)))
    gauges = []
    for i, (row, col) in enumerate([(0, 0), (2, 3), (4, 5), (1, 5)]):
        lat, lon = spec.cell_center(row, col)
        gauges.append(GaugeObservation(row, col, lat, lon, float(rng.gamma(0.5, 2.0)), f"g{i}", timestamp))
    return SampleFrame(timestamp, sat, elev, tuple(gauges), None, 2021)


@pytest.mark.fast
class TestConfig:
    """Model configuration and inference modes."""

    def test_downsample_must_match_stages(self) -> None:
        with pytest.raises(ConfigError):
            _tiny_config(downsample=4)

    def test_log_var_bounds_ordered(self) -> None:
        with pytest.raises(ConfigError):
            _tiny_config(log_var_min=0.0, log_var_max=-1.0)

    def test_parse_modes(self) -> None:
        assert InferenceMode.parse("standard") == STANDARD
        assert InferenceMode.parse("rollout").kind == "pure_rollout"
        assert InferenceMode.parse("hybrid:0.25") == InferenceMode("hybrid", 0.25)
        assert InferenceMode.parse("hybrid").alpha == 0.5

    def test_parse_rejects_unknown(self) -> None:
        with pytest.raises(ConfigError):
            InferenceMode.parse("beam")
        with pytest.raises(ConfigError):
            InferenceMode.parse("hybrid:1.5")


@pytest.mark.fast
class TestForward:
    """Shapes and value ranges of the forward pass."""

    def test_encode_pads_odd_grids(self) -> None:
        model = NSPModel(_tiny_config(), seed=1)
        x, _ = frame_inputs(_frame())
        post = encode(x, model)
        assert post.mean.shape == (1, 2, 3, 4)
        assert np.all(post.log_var.data <= model.cfg.log_var_max)

    def test_encode_rejects_non_finite(self) -> None:
        model = NSPModel(_tiny_config(), seed=1)
        x, _ = frame_inputs(_frame())
        x[0, 0, 0] = np.nan
        with pytest.raises(DomainError):
            encode(x, model)

    def test_decode_shapes_and_ranges(self) -> None:
        model = NSPModel(_tiny_config(), seed=1)
        x, sat = frame_inputs(_frame())
        z = reparameterize(encode(x, model), np.zeros((1, 2, 3, 4)))
        pred = decode(z, x[0], x[1], model, sat)
        assert pred.y_hat.shape == (1, 1, 5, 7)
        assert np.all(pred.field() >= 0)
        assert np.all(pred.log_var_y.data >= model.cfg.log_var_min)
        assert np.all(pred.log_var_y.data <= model.cfg.log_var_max)

    def test_decode_rejects_wrong_latent(self) -> None:
        model = NSPModel(_tiny_config(), seed=1)
        x, sat = frame_inputs(_frame())
        with pytest.raises(ShapeError):
            decode(Tensor(np.zeros((1, 2, 2, 2))), x[0], x[1], model, sat)

    def test_reparameterize_noise_shape(self) -> None:
        model = NSPModel(_tiny_config(), seed=1)
        x, _ = frame_inputs(_frame())
        with pytest.raises(ShapeError):
            reparameterize(encode(x, model), np.zeros((1, 2, 3, 3)))

    def test_homoscedastic_variance_is_constant(self) -> None:
        model = NSPModel(_tiny_config(homoscedastic=True), seed=1)
        pred = infer(_frame(), model, STANDARD, np.random.default_rng(0))
        assert np.unique(pred.log_var_y.data).size == 1


@pytest.mark.fast
class TestRefine:
    """The log1p-space residual."""

    def test_zero_residual_returns_satellite(self) -> None:
        sat = np.array([[0.0, 0.3], [2.5, 80.0]])
        out = refine(Tensor(np.zeros((1, 1, 2, 2))), sat)
        assert np.array_equal(out.data[0, 0], sat)

    def test_matches_log1p_formula(self) -> None:
        sat = np.array([[1.0, 4.0]])
        delta = np.array([[[[0.3, -0.7]]]])
        out = refine(Tensor(delta), sat)
        expected = np.maximum(0.0, np.expm1(np.log1p(sat) + delta[0, 0]))
        assert np.allclose(out.data[0, 0], expected)

    def test_never_negative(self) -> None:
        out = refine(Tensor(np.full((1, 1, 1, 2), -5.0)), np.array([[0.0, 0.1]]))
        assert np.all(out.data >= 0)

    def test_without_residual_ignores_satellite(self) -> None:
        delta = Tensor(np.array([[[[np.log(3.0)]]]]))
        assert refine(delta, np.array([[50.0]]), residual=False).item() == pytest.approx(2.0)


@pytest.mark.fast
class TestDynamics:
    """Latent SDE and inference modes."""

    def test_initial_drift_is_zero(self) -> None:
        model = NSPModel(_tiny_config(), seed=2)
        z = Tensor(np.random.default_rng(0).normal(size=(1, 2, 3, 4)))
        trans = sde_step(z, model)
        assert np.array_equal(trans.mean.data, z.data)
        assert np.all(trans.var.data > 0)

    def test_variance_scales_with_dt(self) -> None:
        model = NSPModel(_tiny_config(), seed=2)
        z = Tensor(np.random.default_rng(0).normal(size=(1, 2, 3, 4)))
        assert np.allclose(sde_step(z, model, dt=0.5).var.data * 2, sde_step(z, model, dt=1.0).var.data)

    def test_non_positive_dt(self) -> None:
        model = NSPModel(_tiny_config(), seed=2)
        with pytest.raises(ContractError):
            sde_step(Tensor(np.zeros((1, 2, 3, 4))), model, dt=0.0)

    def test_rollout_needs_previous_latent(self) -> None:
        model = NSPModel(_tiny_config(), seed=2)
        with pytest.raises(ContractError):
            infer(_frame(), model, InferenceMode.parse("rollout"))

    def test_hybrid_zero_alpha_is_standard(self) -> None:
        model = NSPModel(_tiny_config(), seed=2)
        frame = _frame()
        z_prev = Tensor(np.ones((1, 2, 3, 4)))
        standard = infer(frame, model, STANDARD, np.random.default_rng(5))
        hybrid = infer(frame, model, InferenceMode("hybrid", 0.0), np.random.default_rng(5), z_prev)
        assert np.allclose(standard.field(), hybrid.field())

    def test_pure_rollout_ignores_frame_gauges(self) -> None:
        model = NSPModel(_tiny_config(), seed=2)
        z_prev = Tensor(np.random.default_rng(1).normal(size=(1, 2, 3, 4)))
        mode = InferenceMode.parse("rollout")
        a = infer(_frame(seed=0), model, mode, z_prev=z_prev, context=[0])
        b = infer(_frame(seed=0), model, mode, z_prev=z_prev, context=[0, 1, 2, 3])
        assert np.array_equal(a.field(), b.field())

    def test_inference_builds_no_graph(self) -> None:
        model = NSPModel(_tiny_config(), seed=2)
        pred = infer(_frame(), model, STANDARD, np.random.default_rng(0))
        assert not pred.y_hat.requires_grad

    def test_ensemble(self) -> None:
        model = NSPModel(_tiny_config(), seed=2)
        out = infer_ensemble(_frame(), model, 3, np.random.default_rng(0))
        assert set(out) == {"mean", "spread", "aleatoric"}
        assert out["mean"].shape == (5, 7)
        assert np.all(out["spread"] >= 0)


@pytest.mark.fast
class TestCheckpoint:
    """Binary checkpoint format."""

    def test_round_trip(self, tmp_path) -> None:
        model = NSPModel(_tiny_config(), seed=3)
        path = str(tmp_path / "model.nspckpt")
        save_checkpoint(path, model, seed=3, step=17, extra={"fold": 0})
        loaded, header = load_checkpoint(path)
        assert header["step"] == 17
        assert header["extra"] == {"fold": 0}
        assert loaded.cfg == model.cfg
        for name, p in model.parameters().items():
            assert np.array_equal(loaded.parameters()[name].data, p.data.astype(np.float32).astype(np.float64))

    def test_output_is_deterministic(self, tmp_path) -> None:
        model = NSPModel(_tiny_config(), seed=3)
        a, b = tmp_path / "a.nspckpt", tmp_path / "b.nspckpt"
        save_checkpoint(str(a), model, 3, 0)
        save_checkpoint(str(b), model, 3, 0)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path) -> None:
        path = tmp_path / "junk.nspckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_truncated_blob(self, tmp_path) -> None:
        model = NSPModel(_tiny_config(), seed=3)
        path = tmp_path / "model.nspckpt"
        save_checkpoint(str(path), model, 3, 0)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_state_dict_shape_mismatch(self) -> None:
        model = NSPModel(_tiny_config(), seed=3)
        state = model.state_dict()
        state["decoder.delta.bias"] = np.zeros(5)
        with pytest.raises(ShapeError):
            model.load_state_dict(state)

    def test_parameter_counts(self) -> None:
        counts = NSPModel(_tiny_config(), seed=3).count_parameters()
        assert counts["total"] == counts["encoder"] + counts["decoder"] + counts["sde"]


@pytest.mark.unit
class TestGradients:
    """End-to-end gradient check through encoder, sampling and decoder."""

    def test_model_grad_check(self) -> None:
        model = NSPModel(_tiny_config(), seed=4)
        frame = _frame(h=6, w=6, seed=4)
        x, sat = frame_inputs(frame, context=[0, 1])
        noise = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
        rows, cols, values = np.array([2, 4]), np.array([3, 5]), np.array([0.7, 2.0])
        params = list(model.parameters().values())

        def loss():
            post = encode(x, model)
            pred = decode(reparameterize(post, noise), x[0], x[1], model, sat)
            return gauge_nll(pred, rows, cols, values) + prior_kl(post)

        assert T.grad_check(loss, params, n_coords=6, rng=np.random.default_rng(1), floor=1e-4) < 1e-4
