"""Optimal-transport flow matching: linear paths, velocity regression, ODE sampling.

Direction convention: time runs 0 -> 1 from noise to data, the opposite of
the diffusion module whose step index runs T -> 1. The linear path
x_t = (1-t) x0 + t x1 with regression target u = x1 - x0 is the standard
conditional construction for optimal-transport flow matching; the (x0, x1)
pairing is the independent coupling (no minibatch transport assignment).
Sampling integrates dx/dt = v(x, t) deterministically — repeated runs from
the same starting noise are bitwise identical.

Continuous times reuse the sinusoidal step embeddings of the diffusion
networks by mapping t to the integer grid round(t * (T - 1)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from .backbone import (
    ConditioningInput,
    ModelParams,
    UNet,
    UNetSpec,
    module_from_params,
    register_network_kind,
)
from .core import Dataset, config_hash, derive_seed
from .ddpm import TrainResult, training_arrays
from .errors import (
    ConfigError,
    NonFiniteLossError,
    NonFiniteStateError,
    RangeError,
    ShapeError,
)

SOLVER_METHODS = ("euler", "heun")


# ---------------------------------------------------------------------------
# paths and objective
# ---------------------------------------------------------------------------


@dataclass
class FlowBatch:
    x0: torch.Tensor  # noise endpoints ~ N(0, I)
    x1: torch.Tensor  # data endpoints
    t: torch.Tensor  # (B,) times in [0, 1)
    cond: Optional[torch.Tensor] = None


def make_flow_batch(
    x1: np.ndarray, rng: np.random.Generator, cond: Optional[np.ndarray] = None
) -> FlowBatch:
    """Pair data with fresh noise (independent coupling) and uniform times."""
    x1 = np.asarray(x1, dtype=np.float32)
    t = rng.random(x1.shape[0])
    x0 = rng.standard_normal(x1.shape).astype(np.float32)
    return FlowBatch(
        x0=torch.from_numpy(x0),
        x1=torch.from_numpy(x1),
        t=torch.from_numpy(t.astype(np.float32)),
        cond=None if cond is None else torch.from_numpy(np.asarray(cond, dtype=np.float32)),
    )


def _broadcast_t(t, like):
    arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise RangeError(f"interpolation time must lie in [0, 1], got {t}")
    if torch.is_tensor(like):
        out = torch.from_numpy(arr).to(dtype=like.dtype)
        if like.dim() > 1 and arr.size > 1:
            out = out.reshape(-1, *([1] * (like.dim() - 1)))
        return out
    if np.ndim(like) > 1 and arr.size > 1:
        return arr.reshape(-1, *([1] * (np.ndim(like) - 1)))
    return arr if arr.size > 1 else arr[0]


def ot_interpolate(x0, x1, t):
    """Point on the linear path, x_t = (1 - t) x0 + t x1."""
    if tuple(np.shape(x0)) != tuple(np.shape(x1)):
        raise ShapeError(f"endpoint shapes differ: {np.shape(x0)} vs {np.shape(x1)}")
    tb = _broadcast_t(t, x0)
    return (1 - tb) * x0 + tb * x1


def t_to_grid(t, T: int = 1000):
    """Map continuous time in [0, 1] onto the integer embedding grid."""
    if torch.is_tensor(t):
        return torch.round(t.to(torch.float32) * (T - 1))
    return np.round(np.asarray(t, dtype=np.float64) * (T - 1))


class GridVelocity(nn.Module):
    """Adapts a step-indexed denoiser network to continuous-time calls."""

    def __init__(self, net: nn.Module, T: int = 1000):
        super().__init__()
        self.net = net
        self.T = int(T)

    def forward(self, x: torch.Tensor, t, cond: Optional[torch.Tensor] = None):
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), float(t))
        return self.net(x, t_to_grid(t, self.T), cond)


@dataclass
class MLPSpec:
    in_dim: int
    hidden: tuple = (64, 64)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.in_dim < 1 or not self.hidden:
            raise ConfigError("velocity MLP needs in_dim >= 1 and a hidden layer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "velocity_mlp"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MLPSpec":
        d = {k: v for k, v in d.items() if k != "kind"}
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


class VelocityMLP(nn.Module):
    """Velocity field for low-dimensional tasks; time enters as a feature."""

    def __init__(self, spec: MLPSpec):
        super().__init__()
        self.spec = spec
        dims = (spec.in_dim + 1,) + spec.hidden
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.SiLU()]
        layers.append(nn.Linear(dims[-1], spec.in_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, t, cond=None) -> torch.Tensor:
        if cond is not None:
            raise ShapeError("velocity MLP has no conditioning pathway")
        if x.dim() != 2 or x.shape[1] != self.spec.in_dim:
            raise ShapeError(f"expected (B, {self.spec.in_dim}), got {tuple(x.shape)}")
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), float(t))
        t = t.to(x.dtype).reshape(-1, 1).expand(x.shape[0], 1)
        return self.net(torch.cat([x, t], dim=1))


register_network_kind("velocity_mlp", lambda spec: VelocityMLP(MLPSpec.from_dict(spec)))


def _as_velocity(model, T: Optional[int] = None):
    """Accept ModelParams, a step-indexed UNet, a continuous-t module, or a callable."""
    if isinstance(model, ModelParams):
        grid_T = int(model.meta.get("T", T or 1000))
        net = module_from_params(model)
        return GridVelocity(net, grid_T) if isinstance(net, UNet) else net
    if isinstance(model, UNet):
        return GridVelocity(model, T or 1000)
    return model


def fm_loss(model, batch: FlowBatch, T: Optional[int] = None) -> torch.Tensor:
    """Mean squared error between the predicted and path velocity x1 - x0."""
    v = _as_velocity(model, T)
    if batch.x0.shape != batch.x1.shape:
        raise ShapeError(f"endpoint shapes differ: {batch.x0.shape} vs {batch.x1.shape}")
    x_t = ot_interpolate(batch.x0, batch.x1, batch.t.numpy())
    v_hat = v(x_t.to(torch.float32), batch.t, batch.cond)
    if v_hat.shape != batch.x1.shape:
        raise ShapeError(f"velocity shape {tuple(v_hat.shape)} != data {tuple(batch.x1.shape)}")
    return torch.mean((v_hat - (batch.x1 - batch.x0)) ** 2)


# ---------------------------------------------------------------------------
# ODE sampling
# ---------------------------------------------------------------------------


@dataclass
class ODESolverConfig:
    steps: int = 100
    method: str = "euler"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"solver needs at least 1 step, got {self.steps}")
        if self.method not in SOLVER_METHODS:
            raise ConfigError(f"method must be one of {SOLVER_METHODS}, got {self.method!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def ode_integrate(model, x0, cond, solver: ODESolverConfig, T: Optional[int] = None):
    """Fixed-step integration of dx/dt = v(x, t) from t=0 to t=1.

    Euler steps x += dt*v; Heun adds a trapezoidal correction. No noise is
    injected anywhere, so the endpoint is a deterministic function of x0.
    """
    v = _as_velocity(model, T)
    is_module = isinstance(v, nn.Module)
    x = torch.as_tensor(np.asarray(x0)) if not torch.is_tensor(x0) else x0.clone()
    if is_module:
        x = x.to(torch.float32)
    dt = 1.0 / solver.steps
    grad_ctx = torch.no_grad() if is_module else _NullContext()
    with grad_ctx:
        for k in range(solver.steps):
            t = k * dt
            v1 = v(x, t, cond)
            if solver.method == "euler":
                x = x + dt * v1
            else:
                v2 = v(x + dt * v1, t + dt, cond)
                x = x + (dt / 2) * (v1 + v2)
            if not bool(torch.isfinite(torch.as_tensor(x)).all()):
                raise NonFiniteStateError(
                    f"state became non-finite at step {k + 1}/{solver.steps}"
                )
    return x.numpy() if torch.is_tensor(x) else np.asarray(x)


class _NullContext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def sample_flow(
    model,
    cond,
    solver: ODESolverConfig,
    rng: np.random.Generator,
    shape: tuple,
    T: Optional[int] = None,
) -> np.ndarray:
    """Draw starting noise and integrate; the conditioning is applied every step."""
    x0 = rng.standard_normal(shape).astype(np.float32)
    ct = None
    if cond is not None:
        onehot = cond.onehot if isinstance(cond, ConditioningInput) else np.asarray(cond)
        if onehot.ndim == 3:
            onehot = np.broadcast_to(onehot, (shape[0],) + onehot.shape)
        ct = torch.from_numpy(onehot.astype(np.float32, copy=True))
    return ode_integrate(model, x0, ct, solver, T)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class FlowTrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 2.5e-5
    weight_decay: float = 0.0
    seed: int = 0
    T: int = 1000  # embedding grid resolution, not a solver step count
    widths: tuple = (16, 32, 64)  # UNet level widths, or MLP hidden sizes
    blocks_per_level: int = 1
    attention_levels: tuple = (2,)
    conditioning_mode: str = "controlnet"

    def to_dict(self) -> dict:
        return asdict(self)


def train_flow(
    dataset: Union[Dataset, tuple], config: FlowTrainConfig, split: str = "train"
) -> TrainResult:
    """Regress the path velocity on (data, mask) pairs; deterministic per seed.

    ``dataset`` may be a phantom Dataset or a prebuilt ``(x1, cond)`` pair.
    2-D data (N, d) trains a small MLP field with no conditioning; image
    data (N, C, H, W) trains the conditioned UNet.
    """
    if config.epochs < 1 or config.batch_size < 1:
        raise ConfigError("epochs and batch_size must be positive")
    if isinstance(dataset, Dataset):
        x1, cond = training_arrays(dataset, "image_generator", split)
    else:
        x1, cond = dataset
    x1 = np.asarray(x1, dtype=np.float32)
    if x1.shape[0] == 0:
        raise ConfigError("empty training set")

    if x1.ndim == 2:
        if cond is not None:
            raise ConfigError("vector-field training takes no conditioning")
        role = "flow_vector_field"
        spec = MLPSpec(in_dim=x1.shape[1], hidden=config.widths)
        torch.manual_seed(derive_seed(config.seed, f"init:{role}"))
        net = VelocityMLP(spec)
        field = net
    elif x1.ndim == 4:
        role = "flow_image_generator"
        spec = UNetSpec(
            in_channels=x1.shape[1],
            out_channels=x1.shape[1],
            widths=config.widths,
            blocks_per_level=config.blocks_per_level,
            attention_levels=config.attention_levels,
            conditioning_mode=config.conditioning_mode,
        )
        torch.manual_seed(derive_seed(config.seed, f"init:{role}"))
        net = UNet(spec)
        field = GridVelocity(net, config.T)
    else:
        raise ShapeError(f"data must be (N, d) or (N, C, H, W), got {x1.shape}")

    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(derive_seed(config.seed, f"batches:{role}"))
    n = x1.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)

    step_losses = []
    epoch_losses = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        running = []
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size : (step + 1) * config.batch_size]
            batch = make_flow_batch(x1[idx], rng, None if cond is None else cond[idx])
            loss = fm_loss(field, batch)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            val = float(loss.detach())
            step_losses.append((epoch, step, val))
            running.append(val)
        epoch_losses.append(float(np.mean(running)))

    meta = {
        "epoch": config.epochs,
        "seed": config.seed,
        "config_hash": config_hash(config.to_dict()),
        "T": config.T,
        "objective": "flow",
        "role": role,
    }
    params = ModelParams.from_module(net, spec.to_dict(), meta)
    return TrainResult(params=params, step_losses=step_losses, epoch_losses=epoch_losses)
