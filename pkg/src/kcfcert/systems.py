"""Benchmark control systems, integration, and snapshot collection.

Continuous-time systems are discretized with a fixed-step RK4 under
zero-order-hold inputs; synthetic discrete systems supply their exact map.
Data collection follows a single-experiment protocol: one long trajectory
under piecewise-constant random inputs, chopped into one-step snapshots and
split into train/test sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError, ValidationError
from .regression import SnapshotDataset

# Trajectories that wander beyond this multiple of the operating box halfwidth
# abort collection; the resulting data would be meaningless.
GUARD_FACTOR = 10.0


def integrate_step(rhs, x, u, dt) -> np.ndarray:
    """Classic fourth-order Runge-Kutta step with the input held constant."""
    k1 = rhs(x, u)
    k2 = rhs(x + 0.5 * dt * k1, u)
    k3 = rhs(x + 0.5 * dt * k2, u)
    k4 = rhs(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class ControlSystem:
    """A control system with either a vector field or an exact discrete map.

    state_box and input_box are (dim, 2) arrays of [low, high] rows defining
    the operating region; inputs are sampled from input_box and trajectories
    are guarded against leaving a blown-up state_box.  `params` holds enough
    JSON-serializable data to rebuild the system from its tag.
    """

    n: int
    m: int
    state_box: np.ndarray
    input_box: np.ndarray
    tag: str
    rhs: Optional[Callable] = None
    discrete_map: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.state_box = np.asarray(self.state_box, dtype=float).reshape(self.n, 2)
        self.input_box = np.asarray(self.input_box, dtype=float).reshape(self.m, 2)
        if np.any(self.state_box[:, 0] >= self.state_box[:, 1]) or np.any(
            self.input_box[:, 0] >= self.input_box[:, 1]
        ):
            raise ValidationError(f"{self.tag}: boxes must have low < high")
        if (self.rhs is None) == (self.discrete_map is None):
            raise ValidationError(
                f"{self.tag}: provide exactly one of rhs and discrete_map"
            )

    def step(self, x, u, dt) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.n)
        u = np.asarray(u, dtype=float).reshape(self.m)
        if self.discrete_map is not None:
            return np.asarray(self.discrete_map(x, u), dtype=float).reshape(self.n)
        return integrate_step(self.rhs, x, u, dt)


# ---------------------------------------------------------------------------
# DC motor benchmark
# ---------------------------------------------------------------------------

def _f_tanh(u):
    return 2.0 * np.tanh(u)


def _f_tanh_cos(u):
    return 2.0 * np.tanh(u * np.cos(u))


INPUT_TERMS = {"tanh": _f_tanh, "tanh-cos": _f_tanh_cos}


def dc_motor_rhs(x, u, input_term=_f_tanh) -> np.ndarray:
    """Field-excited DC motor, states (current, speed), scalar field input."""
    f = input_term(u[0])
    return np.array([
        -39.3153 * x[0] - 0.805732 * x[1] * f + 191.083,
        -1.65986 * x[1] + 57.3696 * x[0] * f - 333.333,
    ])


def dc_motor(input_term="tanh") -> ControlSystem:
    """The DC motor benchmark; `input_term` selects the input nonlinearity."""
    if input_term not in INPUT_TERMS:
        raise ValidationError(
            f"unknown input term {input_term!r}; choose from {sorted(INPUT_TERMS)}"
        )
    f = INPUT_TERMS[input_term]
    return ControlSystem(
        n=2,
        m=1,
        state_box=[[-5.0, 15.0], [-250.0, 125.0]],
        input_box=[[-2.0, 2.0]],
        tag=f"dc-motor-{input_term}",
        rhs=lambda x, u: dc_motor_rhs(x, u, f),
    )


# ---------------------------------------------------------------------------
# Synthetic discrete systems (exact lifted dynamics for validation)
# ---------------------------------------------------------------------------

def synthetic_linear(a, b, state_box=None, input_box=None) -> ControlSystem:
    """Exact discrete linear system x+ = a x + b u."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, m = b.shape
    return ControlSystem(
        n=n, m=m,
        state_box=state_box if state_box is not None else [[-1.0, 1.0]] * n,
        input_box=input_box if input_box is not None else [[-1.0, 1.0]] * m,
        tag="synthetic-linear",
        discrete_map=lambda x, u: a @ x + b @ u,
        params={"a": a.tolist(), "b": b.tolist()},
    )


def synthetic_bilinear(a, blocks, state_box=None, input_box=None) -> ControlSystem:
    """Exact discrete bilinear system x+ = a x + sum_i u_i blocks[i] x."""
    a = np.asarray(a, dtype=float)
    blocks = [np.asarray(bk, dtype=float) for bk in blocks]
    n = a.shape[0]
    m = len(blocks)

    def advance(x, u):
        xp = a @ x
        for ui, bk in zip(u, blocks):
            xp = xp + ui * (bk @ x)
        return xp

    return ControlSystem(
        n=n, m=m,
        state_box=state_box if state_box is not None else [[-1.0, 1.0]] * n,
        input_box=input_box if input_box is not None else [[-1.0, 1.0]] * m,
        tag="synthetic-bilinear",
        discrete_map=advance,
        params={"a": a.tolist(), "blocks": [bk.tolist() for bk in blocks]},
    )


def system_from_meta(meta: dict) -> ControlSystem:
    """Rebuild the generating system from dataset metadata (tag + params)."""
    tag = meta.get("system", "")
    if tag.startswith("dc-motor-"):
        return dc_motor(tag[len("dc-motor-"):])
    params = meta.get("system_params", {})
    if tag == "synthetic-linear":
        return synthetic_linear(params["a"], params["b"])
    if tag == "synthetic-bilinear":
        return synthetic_bilinear(params["a"], params["blocks"])
    raise ValidationError(f"cannot rebuild system from tag {tag!r}")


# ---------------------------------------------------------------------------
# Data collection
# ---------------------------------------------------------------------------

def random_input_sequence(system: ControlSystem, n_steps, hold_steps, rng) -> np.ndarray:
    """Piecewise-constant inputs: uniform draws held for hold_steps samples."""
    if hold_steps < 1:
        raise ValidationError("hold_steps must be at least 1")
    n_levels = -(-n_steps // hold_steps)
    lo = system.input_box[:, 0][:, None]
    hi = system.input_box[:, 1][:, None]
    levels = rng.uniform(lo, hi, size=(system.m, n_levels))
    return np.repeat(levels, hold_steps, axis=1)[:, :n_steps]


def simulate_trajectory(system: ControlSystem, x0, u_seq, dt) -> np.ndarray:
    """Roll the true system through an input sequence; returns (n, T + 1).

    Aborts with NumericalError if the state leaves the guard region
    (state_box blown up by GUARD_FACTOR about its center).
    """
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    center = system.state_box.mean(axis=1)
    halfwidth = 0.5 * (system.state_box[:, 1] - system.state_box[:, 0])
    bound = GUARD_FACTOR * halfwidth
    n_steps = u_seq.shape[1]
    traj = np.empty((system.n, n_steps + 1))
    traj[:, 0] = np.asarray(x0, dtype=float).reshape(system.n)
    for t in range(n_steps):
        xp = system.step(traj[:, t], u_seq[:, t], dt)
        if not np.all(np.isfinite(xp)) or np.any(np.abs(xp - center) > bound):
            raise NumericalError(
                f"{system.tag}: trajectory left the guard region at step {t + 1} "
                f"(state {np.array2string(xp, precision=3)})"
            )
        traj[:, t + 1] = xp
    return traj


def _steps_of(duration, dt, what):
    ratio = duration / dt
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > 1e-9 * max(1.0, abs(ratio)):
        raise ValidationError(f"{what} ({duration}) must be a positive multiple of dt ({dt})")
    return steps


@dataclass
class ExperimentProtocol:
    """Single-experiment collection recipe.

    duration and hold are in seconds and must be integer multiples of dt.
    split is "random" (seeded permutation) or "contiguous" (train first).
    """

    duration: float
    dt: float
    hold: float
    x0: np.ndarray
    seed: int = 0
    train_fraction: float = 0.8
    split: str = "random"

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("train_fraction must be strictly between 0 and 1")
        if self.split not in ("random", "contiguous"):
            raise ValidationError(f"unknown split {self.split!r}")
        self.n_steps = _steps_of(self.duration, self.dt, "duration")
        self.hold_steps = _steps_of(self.hold, self.dt, "hold")


def collect(system: ControlSystem, protocol: ExperimentProtocol) -> SnapshotDataset:
    """Run one experiment and package the one-step snapshot pairs.

    A duration-T run at step dt yields exactly T/dt snapshots
    (x_k, u_k) -> x_{k+1}.  The train mask follows protocol.split.
    """
    if protocol.x0.shape[0] != system.n:
        raise ValidationError(
            f"initial state has dimension {protocol.x0.shape[0]}, system has {system.n}"
        )
    rng = np.random.default_rng(protocol.seed)
    u_seq = random_input_sequence(system, protocol.n_steps, protocol.hold_steps, rng)
    traj = simulate_trajectory(system, protocol.x0, u_seq, protocol.dt)

    n_snap = protocol.n_steps
    n_train = int(round(protocol.train_fraction * n_snap))
    mask = np.zeros(n_snap, dtype=bool)
    if protocol.split == "random":
        mask[rng.permutation(n_snap)[:n_train]] = True
    else:
        mask[:n_train] = True

    meta = {
        "system": system.tag,
        "system_params": dict(system.params),
        "integrator": "exact" if system.discrete_map is not None else "rk4",
        "dt": protocol.dt,
        "duration": protocol.duration,
        "hold": protocol.hold,
        "seed": protocol.seed,
        "split": protocol.split,
        "train_fraction": protocol.train_fraction,
        "x0": protocol.x0.tolist(),
    }
    return SnapshotDataset(
        x=traj[:, :-1], u=u_seq, xplus=traj[:, 1:], train_mask=mask, meta=meta,
    )
