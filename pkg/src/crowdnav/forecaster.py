"""Encoder / ConvLSTM / decoder crowd forecaster, its loss, training and baselines."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import nn
from .fields import RHO, SIGMA2, FieldSequence, GridSpec, sample_points
from .ingest import DatasetWindow
from .nn import Param, Tape, Tensor

log = logging.getLogger(__name__)

# Features are divided by these before entering the network and the training loss.
FEATURE_SCALE = np.array([1.0, 2.0, 2.0, 1.0])
WEIGHT_FLOOR = 0.01
LEAKY_SLOPE = 0.1


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    enc_channels: tuple[int, int] = (16, 64)
    hidden_channels: int = 64
    k: int = 10
    tau: int = 10
    height: int = 12
    width: int = 36
    n_layers: int = 1

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise ValueError(f"grid {self.height}x{self.width} must be divisible by 4")
        if self.k < 1 or self.tau < 1:
            raise ValueError("k and tau must be >= 1")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    @classmethod
    def deep(cls, **kw) -> "ModelConfig":
        """Heavier comparator: three stacked ConvLSTM layers and doubled channels."""
        base = cls(**kw)
        return cls(
            in_channels=base.in_channels,
            enc_channels=(2 * base.enc_channels[0], 2 * base.enc_channels[1]),
            hidden_channels=2 * base.hidden_channels,
            k=base.k,
            tau=base.tau,
            height=base.height,
            width=base.width,
            n_layers=3,
        )


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Forecaster:
    """Two stride-2 conv encoders, ConvLSTM layer(s), two transposed-conv decoders."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        self.config = config
        dtype = np.dtype(dtype or nn.default_dtype())
        rng = np.random.default_rng(seed)
        c0, (c1, c2), hid = config.in_channels, config.enc_channels, config.hidden_channels

        def param(name, shape, fan_in):
            return Param(name, _uniform(rng, shape, fan_in), dtype)

        self.enc1_w = param("enc1.weight", (c1, c0, 3, 3), c0 * 9)
        self.enc1_b = Param("enc1.bias", np.zeros(c1), dtype)
        self.enc2_w = param("enc2.weight", (c2, c1, 3, 3), c1 * 9)
        self.enc2_b = Param("enc2.bias", np.zeros(c2), dtype)
        self.lstm = [
            nn.ConvLSTMParams.init(f"lstm{i}", c2 if i == 0 else hid, hid, rng, dtype) for i in range(config.n_layers)
        ]
        self.dec1_w = param("dec1.weight", (hid, c1, 4, 4), hid * 4)
        self.dec1_b = Param("dec1.bias", np.zeros(c1), dtype)
        self.dec2_w = param("dec2.weight", (c1, c0, 4, 4), c1 * 4)
        self.dec2_b = Param("dec2.bias", np.zeros(c0), dtype)

    @property
    def dtype(self):
        return self.enc1_w.dtype

    def params(self) -> list[Param]:
        out = [self.enc1_w, self.enc1_b, self.enc2_w, self.enc2_b]
        for layer in self.lstm:
            out += layer.params()
        out += [self.dec1_w, self.dec1_b, self.dec2_w, self.dec2_b]
        return out

    def astype(self, dtype) -> "Forecaster":
        for p in self.params():
            p.astype(dtype)
        return self

    def _encode(self, x: Tensor) -> Tensor:
        y = nn.leaky_relu(nn.conv2d(x, self.enc1_w, self.enc1_b, stride=2), LEAKY_SLOPE)
        return nn.leaky_relu(nn.conv2d(y, self.enc2_w, self.enc2_b, stride=2), LEAKY_SLOPE)

    def _decode(self, h: Tensor) -> Tensor:
        y = nn.leaky_relu(nn.conv_transpose2d(h, self.dec1_w, self.dec1_b), LEAKY_SLOPE)
        y = nn.conv_transpose2d(y, self.dec2_w, self.dec2_b)
        return nn.concat([nn.softplus(y[:, 0:1]), y[:, 1:3], nn.softplus(y[:, 3:4])], axis=1)

    def _step(self, x: Tensor, states: list[nn.ConvLSTMState]) -> list[nn.ConvLSTMState]:
        new = []
        for layer, state in zip(self.lstm, states):
            state = nn.convlstm_step(x, state, layer)
            new.append(state)
            x = state.h
        return new

    def forward_tensor(self, x: np.ndarray, tau: int | None = None) -> list[Tensor]:
        """Run on normalized inputs ``[N, k, 4, H, W]``; returns ``tau`` normalized frames ``[N, 4, H, W]``."""
        tau = self.config.tau if tau is None else tau
        n, k, c, h, w = x.shape
        if c != self.config.in_channels or h % 4 or w % 4:
            raise ValueError(f"input shape {x.shape} does not fit the model")
        x = np.asarray(x, dtype=self.dtype)
        hid = self.config.hidden_channels
        states = [nn.ConvLSTMState.zeros(n, hid, h // 4, w // 4, self.dtype) for _ in self.lstm]
        for t in range(k):
            states = self._step(self._encode(Tensor(x[:, t])), states)
        blank = Tensor(np.zeros((n, self.config.enc_channels[1], h // 4, w // 4), dtype=self.dtype))
        outputs = []
        for _ in range(tau):
            states = self._step(blank, states)
            outputs.append(self._decode(states[-1].h))
        return outputs

    def predict(self, seq: FieldSequence, tau: int | None = None) -> FieldSequence:
        tau = self.config.tau if tau is None else tau
        x = to_model_layout(seq.data)[None]
        out = self.forward_tensor(x, tau)
        frames = np.stack([o.data[0] for o in out]).astype(float)
        return FieldSequence(seq.spec, clean_fields(from_model_layout(frames)), seq.end_index)


def to_model_layout(frames: np.ndarray) -> np.ndarray:
    """[..., T, H, W, 4] physical units -> [..., T, 4, H, W] normalized."""
    return np.moveaxis(frames / FEATURE_SCALE, -1, -3)


def from_model_layout(frames: np.ndarray) -> np.ndarray:
    return np.moveaxis(frames, -3, -1) * FEATURE_SCALE


def clean_fields(data: np.ndarray) -> np.ndarray:
    """Clamp density/variance at zero and apply the empty-cell convention."""
    data = np.array(data, dtype=float)
    data[..., RHO] = np.maximum(data[..., RHO], 0.0)
    data[..., SIGMA2] = np.maximum(data[..., SIGMA2], 0.0)
    data[data[..., RHO] <= 0] = 0.0
    return data


# --------------------------------------------------------------------------
# loss


class LossWeights:
    """Learnable per-feature loss weights ``softplus(theta) + 0.01``."""

    def __init__(self, theta=None, dtype=None):
        theta = np.zeros(4) if theta is None else np.asarray(theta, dtype=float)
        self.theta = Param("loss.theta", theta, dtype or nn.default_dtype())

    @classmethod
    def from_realized(cls, values, dtype=None) -> "LossWeights":
        v = np.asarray(values, dtype=float)
        if np.any(v <= WEIGHT_FLOOR):
            raise ValueError(f"realized weights must exceed {WEIGHT_FLOOR}")
        return cls(np.log(np.expm1(v - WEIGHT_FLOOR)), dtype)

    def tensor(self) -> Tensor:
        return nn.softplus(self.theta) + WEIGHT_FLOOR

    def realized(self) -> np.ndarray:
        return np.logaddexp(0.0, self.theta.data.astype(float)) + WEIGHT_FLOOR

    def params(self) -> list[Param]:
        return [self.theta]


def loss_tensor(pred: Tensor, target: np.ndarray, weights: LossWeights, delta: float = 1.0) -> Tensor:
    """Density-weighted smooth-L1 loss on channel-first arrays ``[..., 4, H, W]``.

    Non-empty cells V are those with target density > 0, pooled over every
    leading axis. Density errors count with weight w_rho; velocity and
    variance errors are additionally weighted by the target density.
    """
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise LossError(f"prediction {pred.shape} and target {target.shape} differ")
    rho = np.take(target, [RHO], axis=-3)
    mask = (rho > 0).astype(pred.dtype)
    n_valid = float(mask.sum())
    if n_valid == 0:
        raise LossError("target has no non-empty cells")
    cell_weight = np.concatenate([mask, np.repeat(mask * rho, 3, axis=-3)], axis=-3)
    per_cell = nn.mul(nn.huber(nn.sub(pred, target), delta), cell_weight)
    axes = tuple(i for i in range(per_cell.ndim) if i != per_cell.ndim - 3)
    per_feature = nn.tsum(per_cell, axis=axes)
    return nn.tsum(nn.mul(weights.tensor(), per_feature)) * (1.0 / n_valid)


def density_weighted_loss(
    pred: FieldSequence | np.ndarray,
    target: FieldSequence | np.ndarray,
    weights: LossWeights,
    feature_scale=None,
) -> float:
    """Loss value for channel-last fields ``[T, H, W, 4]`` in physical units.

    ``feature_scale`` divides each feature first; training uses
    ``FEATURE_SCALE``.
    """
    p = pred.data if isinstance(pred, FieldSequence) else np.asarray(pred, dtype=float)
    t = target.data if isinstance(target, FieldSequence) else np.asarray(target, dtype=float)
    scale = np.ones(4) if feature_scale is None else np.asarray(feature_scale, dtype=float)
    with nn.precision(np.float64):
        w = LossWeights(weights.theta.data.astype(float), np.float64)
        value = loss_tensor(Tensor(np.moveaxis(p / scale, -1, -3)), np.moveaxis(t / scale, -1, -3), w)
    return float(value.data)


# --------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    weights: tuple[float, float, float, float]

    def csv_row(self) -> str:
        w = ",".join(f"{x:.9g}" for x in self.weights)
        return f"{self.epoch},{self.train_loss:.9g},{self.val_loss:.9g},{w}"


TRAIN_LOG_HEADER = "epoch,train_loss,val_loss,w_rho,w_vx,w_vy,w_sigma"


@dataclass
class TrainResult:
    model: Forecaster
    weights: LossWeights
    history: list[EpochRecord] = field(default_factory=list)

    def log_csv(self) -> str:
        return "\n".join([TRAIN_LOG_HEADER] + [r.csv_row() for r in self.history]) + "\n"


def windows_to_arrays(windows: Sequence[DatasetWindow], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([to_model_layout(w.input.data) for w in windows]).astype(dtype)
    y = np.stack([to_model_layout(w.target.data) for w in windows]).astype(dtype)
    return x, y


def batch_loss(model: Forecaster, weights: LossWeights, x: np.ndarray, y: np.ndarray) -> Tensor:
    out = model.forward_tensor(x, y.shape[1])
    return loss_tensor(nn.stack(out, axis=1), y, weights)


def evaluate_loss(model: Forecaster, weights: LossWeights, x: np.ndarray, y: np.ndarray, batch: int = 32) -> float:
    """Loss pooled over all windows (|V| counted over the whole set)."""
    if len(x) == 0:
        return float("nan")
    total, n_valid = 0.0, 0.0
    for a in range(0, len(x), batch):
        xb, yb = x[a:a + batch], y[a:a + batch]
        nv = float((yb[:, :, RHO] > 0).sum())
        if nv == 0:
            continue
        total += batch_loss(model, weights, xb, yb).item() * nv
        n_valid += nv
    return total / n_valid if n_valid else float("nan")


def train(
    model: Forecaster,
    windows: Sequence[DatasetWindow],
    epochs: int,
    lr: float = 1e-3,
    batch: int = 8,
    seed: int = 0,
    val_windows: Sequence[DatasetWindow] | None = None,
    weights: LossWeights | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam over network weights and the four loss-weight scalars.

    Epoch 0 in the history is the loss before any update. Without explicit
    ``val_windows`` the last tenth of ``windows`` (at least one, if there
    are two or more) is held out.
    """
    if not windows:
        raise ValueError("training needs at least one window")
    windows = list(windows)
    if val_windows is None:
        n_val = max(1, len(windows) // 10) if len(windows) > 1 else 0
        if n_val:
            windows, val_windows = windows[:-n_val], windows[-n_val:]
        else:
            val_windows = []
    weights = weights or LossWeights(dtype=model.dtype)
    params = model.params() + weights.params()
    x, y = windows_to_arrays(windows, model.dtype)
    vx, vy = windows_to_arrays(val_windows, model.dtype) if val_windows else (x[:0], y[:0])
    rng = np.random.default_rng(seed)

    def record(epoch: int, train_loss: float) -> None:
        rec = EpochRecord(epoch, train_loss, evaluate_loss(model, weights, vx, vy), tuple(weights.realized()))
        result.history.append(rec)
        log.info("epoch %d train %.5f val %.5f", rec.epoch, rec.train_loss, rec.val_loss)
        if on_epoch:
            on_epoch(rec)

    result = TrainResult(model, weights)
    record(0, evaluate_loss(model, weights, x, y))
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x))
        total, n_valid = 0.0, 0.0
        for a in range(0, len(order), batch):
            idx = np.sort(order[a:a + batch])
            xb, yb = x[idx], y[idx]
            nv = float((yb[:, :, RHO] > 0).sum())
            if nv == 0:
                continue
            with Tape() as tape:
                loss = batch_loss(model, weights, xb, yb)
                nn.backward(loss, params, tape)
            nn.adam_step(params, lr)
            total += loss.item() * nv
            n_valid += nv
        record(epoch, total / n_valid if n_valid else float("nan"))
    return result


def model_checkpoint_bytes(model: Forecaster, weights: LossWeights | None = None) -> bytes:
    params = model.params() + (weights.params() if weights is not None else [])
    return nn.checkpoint_bytes(params)


def load_model(
    source, k: int = 10, tau: int = 10, height: int = 12, width: int = 36
) -> tuple[Forecaster, LossWeights | None]:
    """Rebuild a forecaster from a checkpoint, inferring layer sizes from stored shapes.

    ``k``, ``tau`` and the grid are not stored and must be supplied.
    """
    raw = source if isinstance(source, bytes) else Path(source).read_bytes()
    stored = nn.read_checkpoint(raw)
    try:
        c1, c0 = stored["enc1.weight"].shape[:2]
        c2 = stored["enc2.weight"].shape[0]
        n_layers = sum(1 for name in stored if name.startswith("lstm") and name.endswith(".weight"))
        hidden = stored["lstm0.weight"].shape[0] // 4
    except KeyError as exc:
        raise nn.CheckpointError(f"checkpoint lacks {exc.args[0]}") from None
    cfg = ModelConfig(c0, (c1, c2), hidden, k, tau, height, width, n_layers)
    model = Forecaster(cfg)
    weights = LossWeights() if "loss.theta" in stored else None
    nn.load_checkpoint(raw, model.params() + (weights.params() if weights else []))
    return model, weights


# --------------------------------------------------------------------------
# predictors


class Predictor(Protocol):
    def predict(self, seq: FieldSequence, tau: int) -> FieldSequence: ...


def predict_persistence(seq: FieldSequence, tau: int) -> FieldSequence:
    """Repeat the last observed frame ``tau`` times."""
    data = np.repeat(seq.data[-1:], tau, axis=0)
    return FieldSequence(seq.spec, data, seq.end_index)


def transport_velocity(frame: np.ndarray, radius: int = 2) -> np.ndarray:
    """Density-weighted mean velocity over a (2r+1)^2 window.

    Unlike the raw mean-velocity field, this is defined just ahead of a
    moving crowd, which is where a backtrace has to look upstream.
    """
    rho = frame[..., RHO]
    mom = frame[..., 1:3] * rho[..., None]
    h, w = rho.shape
    pr = np.pad(rho, radius)
    pm = np.pad(mom, ((radius, radius), (radius, radius), (0, 0)))
    s_rho = np.zeros_like(rho)
    s_mom = np.zeros_like(mom)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            s_rho += pr[dy:dy + h, dx:dx + w]
            s_mom += pm[dy:dy + h, dx:dx + w]
    vel = np.zeros_like(mom)
    ok = s_rho > 0
    vel[ok] = s_mom[ok] / s_rho[ok, None]
    return vel


def advect_frame(spec: GridSpec, frame: np.ndarray) -> np.ndarray:
    """One semi-Lagrangian step: every field is sampled at x - v(x) * dt."""
    centers = spec.cell_centers().reshape(-1, 2)
    vel = transport_velocity(frame).reshape(-1, 2)
    src = centers - vel * spec.frame_dt
    one = FieldSequence(spec, frame[None])
    out = sample_points(one, src, np.zeros(len(src)), outside="zero")
    return clean_fields(out.reshape(frame.shape))


def predict_advection(seq: FieldSequence, tau: int) -> FieldSequence:
    """Transport the last frame by its own velocity, ``tau`` steps."""
    frames = []
    cur = seq.data[-1]
    for _ in range(tau):
        cur = advect_frame(seq.spec, cur)
        frames.append(cur)
    return FieldSequence(seq.spec, np.stack(frames), seq.end_index)


class PersistencePredictor:
    name = "persistence"

    def predict(self, seq: FieldSequence, tau: int) -> FieldSequence:
        return predict_persistence(seq, tau)


class AdvectionPredictor:
    name = "advection"

    def predict(self, seq: FieldSequence, tau: int) -> FieldSequence:
        return predict_advection(seq, tau)


class ForecasterPredictor:
    """Learned model; always rolls out its trained horizon."""

    name = "forecaster"

    def __init__(self, model: Forecaster):
        self.model = model

    def predict(self, seq: FieldSequence, tau: int | None = None) -> FieldSequence:
        return self.model.predict(seq.slice(seq.end_index - self.model.config.k, seq.end_index))


class OmniscientPredictor:
    """Returns the true future of ``world``, as far as it is known."""

    name = "omniscient"

    def __init__(self, world: FieldSequence):
        self.world = world

    def predict(self, seq: FieldSequence, tau: int) -> FieldSequence:
        # the whole remaining future, not just tau frames
        start = seq.end_index
        stop = self.world.end_index
        if stop <= start:
            return predict_persistence(seq, max(tau, 1))
        return self.world.slice(start, stop)
