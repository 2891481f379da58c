"""
Neural Stochastic Process refinement model.

An encoder maps the four-channel input to a diagonal Gaussian over a
D x H/r x W/r latent field, a latent SDE with convolutional drift and
diffusion moves that field from one hour to the next, and a decoder turns a
latent sample plus the satellite and elevation fields into a log-space
residual and a heteroscedastic variance. The refined field is the satellite
field corrected multiplicatively by exp(delta) in log1p space.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

import tensor as T
from gridio import SampleFrame, normalize_inputs
from tensor import Tensor
from utils import logger
from utils.errors import ConfigError, ContractError, DomainError, FormatError, ShapeError
from utils.seeding import make_rng

CHECKPOINT_MAGIC = b"NSPCKPT1"


@dataclass
class NSPConfig:
    channels: int = 64
    downsample: int = 4
    hidden: int = 128
    encoder_stages: int = 2
    encoder_blocks: int = 2
    decoder_stages: int = 2
    decoder_blocks: int = 2
    decoder_hidden: int = 128
    fusion_blocks: int = 3
    sde_hidden: int = 64
    dropout: float = 0.1
    log_var_min: float = -6.0
    log_var_max: float = -0.18
    dt: float = 1.0
    sigma_floor: float = 1e-4
    residual: bool = True
    homoscedastic: bool = False
    deterministic_latent: bool = False
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.downsample != 2 ** self.encoder_stages or self.downsample != 2 ** self.decoder_stages:
            raise ConfigError(
                f"downsample {self.downsample} must equal 2**encoder_stages and 2**decoder_stages"
            )
        if self.log_var_min >= self.log_var_max:
            raise ConfigError("log_var_min must be below log_var_max")
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")

    @classmethod
    def from_dict(cls, data: dict) -> "NSPConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class LatentSpec:
    channels: int
    downsample: int
    height: int
    width: int

    @property
    def latent_h(self) -> int:
        return -(-self.height // self.downsample)

    @property
    def latent_w(self) -> int:
        return -(-self.width // self.downsample)

    @property
    def padded(self) -> tuple:
        return (self.latent_h * self.downsample, self.latent_w * self.downsample)


@dataclass
class LatentPosterior:
    mean: Tensor
    log_var: Tensor

    def var(self) -> Tensor:
        return T.exp(self.log_var)


@dataclass
class TransitionGaussian:
    mean: Tensor
    var: Tensor
    dt: float = 1.0


@dataclass
class Prediction:
    delta: Tensor
    y_hat: Tensor
    log_var_y: Tensor
    z: Optional[Tensor] = None

    def field(self) -> np.ndarray:
        """Refined precipitation as an (H, W) array in mm/h."""
        return np.asarray(self.y_hat.data[0, 0], dtype=np.float64)

    def variance(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_var_y.data[0, 0], dtype=np.float64))


@dataclass(frozen=True)
class InferenceMode:
    kind: str = "standard"
    alpha: float = 0.5

    @classmethod
    def parse(cls, text: str) -> "InferenceMode":
        """Parse ``standard``, ``rollout`` / ``pure_rollout`` or ``hybrid[:alpha]``."""
        name, _, value = text.partition(":")
        if name == "standard":
            return cls("standard")
        if name in ("rollout", "pure_rollout"):
            return cls("pure_rollout")
        if name == "hybrid":
            alpha = float(value) if value else 0.5
            if not 0.0 <= alpha <= 1.0:
                raise ConfigError(f"hybrid alpha must lie in [0, 1], got {alpha}")
            return cls("hybrid", alpha)
        raise ConfigError(f"unknown inference mode {text!r}")

    @property
    def needs_previous(self) -> bool:
        return self.kind != "standard"


STANDARD = InferenceMode("standard")


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    """3x3 (or other odd-size) same-padded convolution with bias."""

    def __init__(self, name: str, in_ch: int, out_ch: int, rng: np.random.Generator,
                 kernel: int = 3, stride: int = 1, zero: bool = False, dtype=np.float64) -> None:
        bound = 1.0 / math.sqrt(in_ch * kernel * kernel)
        shape = (out_ch, in_ch, kernel, kernel)
        if zero:
            weight = np.zeros(shape)
            bias = np.zeros(out_ch)
        else:
            weight = rng.uniform(-bound, bound, shape)
            bias = rng.uniform(-bound, bound, out_ch)
        self.weight = Tensor(weight, requires_grad=True, name=f"{name}.weight", dtype=dtype)
        self.bias = Tensor(bias, requires_grad=True, name=f"{name}.bias", dtype=dtype)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride)

    def parameters(self) -> list:
        return [self.weight, self.bias]


class ResidualBlock:
    """relu(x + conv(dropout(relu(conv(x)))))."""

    def __init__(self, name: str, channels: int, rng: np.random.Generator, dtype=np.float64) -> None:
        self.conv1 = Conv2d(f"{name}.conv1", channels, channels, rng, dtype=dtype)
        self.conv2 = Conv2d(f"{name}.conv2", channels, channels, rng, dtype=dtype)

    def __call__(self, x: Tensor, rate: float = 0.0, rng=None, training: bool = False) -> Tensor:
        h = T.relu(self.conv1(x))
        h = T.dropout(h, rate, rng, training)
        h = self.conv2(h)
        return T.relu(x + h)

    def parameters(self) -> list:
        return self.conv1.parameters() + self.conv2.parameters()


class Encoder:
    def __init__(self, cfg: NSPConfig, rng: np.random.Generator, in_channels: int = 4, prefix: str = "encoder") -> None:
        dtype = np.dtype(cfg.dtype)
        h = cfg.hidden
        self.stem = Conv2d(f"{prefix}.stem", in_channels, h, rng, dtype=dtype)
        self.stages = []
        for s in range(cfg.encoder_stages):
            down = Conv2d(f"{prefix}.stage{s}.down", h, h, rng, stride=2, dtype=dtype)
            blocks = [ResidualBlock(f"{prefix}.stage{s}.block{b}", h, rng, dtype) for b in range(cfg.encoder_blocks)]
            self.stages.append((down, blocks))
        self.mean_head = Conv2d(f"{prefix}.mean", h, cfg.channels, rng, dtype=dtype)
        self.log_var_head = Conv2d(f"{prefix}.log_var", h, cfg.channels, rng, dtype=dtype)

    def trunk(self, x: Tensor, rate: float, rng, training: bool) -> Tensor:
        h = T.relu(self.stem(x))
        for down, blocks in self.stages:
            h = T.relu(down(h))
            for block in blocks:
                h = block(h, rate, rng, training)
        return h

    def parameters(self) -> list:
        params = self.stem.parameters()
        for down, blocks in self.stages:
            params += down.parameters()
            for block in blocks:
                params += block.parameters()
        return params + self.mean_head.parameters() + self.log_var_head.parameters()


class Decoder:
    def __init__(self, cfg: NSPConfig, rng: np.random.Generator) -> None:
        dtype = np.dtype(cfg.dtype)
        h = cfg.decoder_hidden
        self.stem = Conv2d("decoder.stem", cfg.channels, h, rng, dtype=dtype)
        self.stages = []
        for s in range(cfg.decoder_stages):
            conv = Conv2d(f"decoder.stage{s}.up", h, h, rng, dtype=dtype)
            blocks = [ResidualBlock(f"decoder.stage{s}.block{b}", h, rng, dtype) for b in range(cfg.decoder_blocks)]
            self.stages.append((conv, blocks))
        # fusion sees the upsampled features plus satellite and elevation
        self.fuse = Conv2d("decoder.fuse", h + 2, h, rng, dtype=dtype)
        self.fusion = [ResidualBlock(f"decoder.fusion{b}", h, rng, dtype) for b in range(cfg.fusion_blocks)]
        self.delta_head = Conv2d("decoder.delta", h, 1, rng, dtype=dtype)
        self.log_var_head = Conv2d("decoder.log_var", h, 1, rng, dtype=dtype)
        self.homo_log_var = Tensor(np.full(1, -1.0), requires_grad=True, name="decoder.homo_log_var", dtype=dtype)
        self.homoscedastic = cfg.homoscedastic

    def parameters(self) -> list:
        params = self.stem.parameters()
        for conv, blocks in self.stages:
            params += conv.parameters()
            for block in blocks:
                params += block.parameters()
        params += self.fuse.parameters()
        for block in self.fusion:
            params += block.parameters()
        params += self.delta_head.parameters()
        if self.homoscedastic:
            params.append(self.homo_log_var)
        else:
            params += self.log_var_head.parameters()
        return params


class LatentSDE:
    """Drift f(z) and diffusion sigma(z) from 3x3 convolutions over the latent field."""

    def __init__(self, cfg: NSPConfig, rng: np.random.Generator) -> None:
        dtype = np.dtype(cfg.dtype)
        self.trunk = Conv2d("sde.trunk", cfg.channels, cfg.sde_hidden, rng, dtype=dtype)
        # zero drift at initialization: training starts from the identity transition
        self.drift = Conv2d("sde.drift", cfg.sde_hidden, cfg.channels, rng, zero=True, dtype=dtype)
        self.diffusion = Conv2d("sde.diffusion", cfg.sde_hidden, cfg.channels, rng, kernel=1, dtype=dtype)

    def parameters(self) -> list:
        return self.trunk.parameters() + self.drift.parameters() + self.diffusion.parameters()


class NSPModel:
    """Parameters and switches of one NSP instance."""

    def __init__(self, cfg: Optional[NSPConfig] = None, seed: int = 0) -> None:
        self.cfg = cfg or NSPConfig()
        self.seed = seed
        rng = make_rng(seed, "init")
        self.encoder = Encoder(self.cfg, rng)
        self.decoder = Decoder(self.cfg, rng)
        self.sde = LatentSDE(self.cfg, rng)
        self.training = False
        self.dropout_rng: Optional[np.random.Generator] = None

    def groups(self) -> dict:
        return {
            "encoder": self.encoder.parameters(),
            "decoder": self.decoder.parameters(),
            "sde": self.sde.parameters(),
        }

    def parameters(self) -> dict:
        """Name -> parameter tensor, in a fixed order."""
        return {p.name: p for group in self.groups().values() for p in group}

    def count_parameters(self) -> dict:
        counts = {name: int(sum(p.size for p in params)) for name, params in self.groups().items()}
        counts["total"] = sum(counts.values())
        return counts

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise FormatError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name}: stored shape {value.shape}, model expects {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def train(self, rng: Optional[np.random.Generator] = None) -> None:
        self.training = True
        self.dropout_rng = rng

    def eval(self) -> None:
        self.training = False
        self.dropout_rng = None

    def latent_spec(self, height: int, width: int) -> LatentSpec:
        return LatentSpec(self.cfg.channels, self.cfg.downsample, height, width)


# ---------------------------------------------------------------------------
# model operations


def _as_batch(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.data.ndim == 4 else Tensor(x.data[None], dtype=dtype)
    array = np.asarray(x, dtype=dtype)
    return Tensor(array[None] if array.ndim == 3 else array, dtype=dtype)


def _pad_to_multiple(x: Tensor, r: int) -> Tensor:
    h, w = x.shape[2], x.shape[3]
    return T.pad2d(x, (-h) % r, (-w) % r)


def encode(x_norm, model: NSPModel) -> LatentPosterior:
    """
    Encode a normalized (4, H, W) input into the latent posterior.

    The input is zero-padded on the bottom/right to a multiple of the
    downsampling ratio; the posterior has shape (1, D, ceil(H/r), ceil(W/r)).

    Raises:
        DomainError: Non-finite input
    """
    cfg = model.cfg
    x = _as_batch(x_norm, np.dtype(cfg.dtype))
    if not np.all(np.isfinite(x.data)):
        raise DomainError("encoder input contains non-finite values")
    x = _pad_to_multiple(x, cfg.downsample)
    enc = model.encoder
    h = enc.trunk(x, cfg.dropout, model.dropout_rng, model.training)
    mean = enc.mean_head(h)
    log_var = T.clamp(enc.log_var_head(h), cfg.log_var_min, cfg.log_var_max)
    return LatentPosterior(mean, log_var)


def reparameterize(post: LatentPosterior, noise) -> Tensor:
    """z = mean + exp(log_var / 2) * noise."""
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=post.mean.dtype)
    if noise.shape != post.mean.shape:
        raise ShapeError(f"noise shape {noise.shape} differs from posterior {post.mean.shape}")
    std = T.exp(T.scale(post.log_var, 0.5))
    return post.mean + T.mul(std, Tensor(noise, dtype=post.mean.dtype))


def sde_step(z: Tensor, model: NSPModel, dt: Optional[float] = None) -> TransitionGaussian:
    """
    One Euler-Maruyama step: mean z + f(z) dt, variance sigma(z)^2 dt.
    """
    dt = model.cfg.dt if dt is None else dt
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")
    sde = model.sde
    h = T.relu(sde.trunk(z))
    drift = sde.drift(h)
    sigma = T.softplus(sde.diffusion(h)) + model.cfg.sigma_floor
    mean = z + T.scale(drift, dt)
    var = T.scale(T.square(sigma), dt)
    return TransitionGaussian(mean, var, dt)


def sample_transition(trans: TransitionGaussian, noise) -> Tensor:
    """Draw z_{t+1} = mean + sqrt(var) * noise; the noise plays the Wiener increment."""
    noise = np.asarray(noise, dtype=trans.mean.dtype)
    return Tensor(trans.mean.data + np.sqrt(trans.var.data) * noise, dtype=trans.mean.dtype)


def decode(z: Tensor, satellite_norm, elevation_norm, model: NSPModel, satellite_raw=None) -> Prediction:
    """
    Decode a latent field into the residual, the refined field and its variance.

    Args:
        z: Latent field (1, D, H', W')
        satellite_norm: log1p satellite field (H, W)
        elevation_norm: elevation / 2000 (H, W)
        model: The model
        satellite_raw: Satellite field in mm/h; recovered with expm1 when omitted

    Returns:
        Prediction: delta, y_hat = max(0, (1 + s) exp(delta) - 1) and log_var_y, all (1, 1, H, W)
    """
    cfg = model.cfg
    dtype = np.dtype(cfg.dtype)
    sat = np.asarray(satellite_norm, dtype=np.float64)
    elev = np.asarray(elevation_norm, dtype=np.float64)
    if sat.shape != elev.shape or sat.ndim != 2:
        raise ShapeError(f"satellite {sat.shape} and elevation {elev.shape} must be matching 2-D grids")
    height, width = sat.shape
    spec = model.latent_spec(height, width)
    if z.shape[1:] != (cfg.channels, spec.latent_h, spec.latent_w):
        raise ShapeError(f"latent shape {z.shape} does not fit a {height}x{width} grid")
    if satellite_raw is None:
        satellite_raw = np.expm1(sat)

    dec = model.decoder
    h = T.relu(dec.stem(z))
    for conv, blocks in dec.stages:
        h = T.relu(conv(T.upsample_nearest(h, 2)))
        for block in blocks:
            h = block(h, cfg.dropout, model.dropout_rng, model.training)

    ph, pw = spec.padded
    side = np.zeros((1, 2, ph, pw))
    side[0, 0, :height, :width] = sat
    side[0, 1, :height, :width] = elev
    h = T.relu(dec.fuse(T.concat([h, Tensor(side, dtype=dtype)], axis=1)))
    for block in dec.fusion:
        h = block(h, cfg.dropout, model.dropout_rng, model.training)

    delta = T.crop2d(dec.delta_head(h), height, width)
    if cfg.homoscedastic:
        raw_log_var = Tensor(np.zeros((1, 1, height, width)), dtype=dtype) + dec.homo_log_var
    else:
        raw_log_var = T.crop2d(dec.log_var_head(h), height, width)
    log_var_y = T.clamp(raw_log_var, cfg.log_var_min, cfg.log_var_max)
    return Prediction(delta, refine(delta, satellite_raw, cfg.residual), log_var_y, z)


def refine(delta: Tensor, satellite_raw, residual: bool = True) -> Tensor:
    """
    Apply the log1p-space residual: y = max(0, exp(log1p(s) + delta) - 1).

    Written as s * exp(delta) + expm1(delta) so that delta = 0 returns s exactly.
    Without the residual path the satellite term is dropped.
    """
    if not residual:
        return T.relu(T.expm1(delta))
    s = Tensor(np.asarray(satellite_raw, dtype=np.float64).reshape(delta.shape), dtype=delta.dtype)
    return T.relu(T.mul(s, T.exp(delta)) + T.expm1(delta))


def frame_inputs(frame: SampleFrame, context=None) -> tuple:
    """(x_norm, satellite_raw) for a frame; context selects the gauge subset."""
    x = normalize_inputs(frame, context)
    return x, frame.satellite.filled(0.0).astype(np.float64)


def infer(
    frame: SampleFrame,
    model: NSPModel,
    mode: InferenceMode = STANDARD,
    rng: Optional[np.random.Generator] = None,
    z_prev: Optional[Tensor] = None,
    context=None,
) -> Prediction:
    """
    Refine one frame.

    Modes:
        standard: encode, sample the posterior, decode;
        pure_rollout: z = mean of the SDE step from ``z_prev``; no encoding;
        hybrid: z = alpha * rollout + (1 - alpha) * encoded sample.

    The encoded sample uses one standard-normal draw from ``rng`` in both
    standard and hybrid modes, so hybrid with alpha = 0 reproduces standard.

    Raises:
        ContractError: A rollout mode without ``z_prev``
    """
    if mode.needs_previous and z_prev is None:
        raise ContractError(f"{mode.kind} inference needs the previous hour's latent")
    rng = rng if rng is not None else np.random.default_rng(0)
    x, sat_raw = frame_inputs(frame, context)

    with T.no_grad():
        z_roll = sde_step(z_prev, model).mean if mode.needs_previous else None
        if mode.kind == "pure_rollout":
            z = z_roll
        else:
            post = encode(x, model)
            noise = rng.standard_normal(post.mean.shape)
            z_enc = post.mean if model.cfg.deterministic_latent else reparameterize(post, noise)
            if mode.kind == "hybrid":
                z = T.scale(z_roll, mode.alpha) + T.scale(z_enc, 1.0 - mode.alpha)
            else:
                z = z_enc
        return decode(z, x[0], x[1], model, sat_raw)


def infer_ensemble(frame: SampleFrame, model: NSPModel, n_samples: int, rng: np.random.Generator, context=None) -> dict:
    """
    Pixel-level uncertainty from repeated latent draws.

    Returns:
        dict: ``mean`` and ``spread`` (variance across samples) of y_hat, and
        ``aleatoric`` (mean decoder variance), each (H, W)
    """
    fields_ = []
    variances = []
    for _ in range(n_samples):
        pred = infer(frame, model, STANDARD, rng, context=context)
        fields_.append(pred.field())
        variances.append(pred.variance())
    stack = np.stack(fields_)
    return {"mean": stack.mean(axis=0), "spread": stack.var(axis=0), "aleatoric": np.mean(variances, axis=0)}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, model: NSPModel, seed: int, step: int, extra: Optional[dict] = None) -> None:
    """
    Write ``NSPCKPT1`` + length-prefixed JSON header + named float32 blobs.

    The output is a pure function of the parameters and header fields.
    """
    params = model.parameters()
    header = {
        "config": asdict(model.cfg),
        "seed": int(seed),
        "step": int(step),
        "params": [{"name": name, "shape": list(p.shape)} for name, p in params.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path: str, dtype: Optional[str] = None) -> tuple:
    """
    Read a checkpoint.

    Returns:
        tuple: (NSPModel, header dict)
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an NSP checkpoint")
    (size,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed header ({e})") from e

    cfg_data = dict(header["config"])
    if dtype is not None:
        cfg_data["dtype"] = dtype
    model = NSPModel(NSPConfig.from_dict(cfg_data), header["seed"])

    offset = 12 + size
    state = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        chunk = raw[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise FormatError(f"{path}: truncated blob for {entry['name']}")
        state[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape)
        offset += 4 * count
    model.load_state_dict(state)
    logger.debug(f"Loaded checkpoint {path} (step {header['step']})")
    return model, header
