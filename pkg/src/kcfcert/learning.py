"""Learned dictionaries: neural state maps and input factors.

The trainable object is a parametric normal basis.  The state map is an MLP
with ELU activations and per-sample layer normalization whose first output
coordinates are pinned to the raw states; the input factor is either a second
MLP producing a full matrix (separable class) or the fixed lifted-linear /
bilinear structure reusing the same state map.

Training minimizes tr(M_CC) plus a small condition-number penalty over
mini-batches, with the regression pseudoinverses realized as SPD solves so
reverse-mode differentiation goes through them exactly.  Everything runs in
float64; batch normalization is deliberately absent (it changes the regression
subspaces per batch).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .consistency import certify
from .dictionary import (
    InputFactor,
    NormalBasis,
    StateDictionary,
    make_bilinear,
    make_lifted_linear,
)
from .errors import DivergenceError, NumericalError, RankDeficiencyError, ValidationError
from .regression import COND_LIMIT, FittedModel, SnapshotDataset, fit_top_block

MODEL_CLASSES = ("separable", "bilinear", "linear")


# ---------------------------------------------------------------------------
# Network building blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one feedforward net.

    Hidden layers are Linear -> LayerNorm -> ELU(1.0); layer_norm can switch
    the normalization off for toy nets.  `pinned` lists output indices that
    bypass the network and return the raw input coordinate of the same index.
    """

    n_in: int
    hidden: tuple
    n_out: int
    layer_norm: bool = True
    pinned: tuple = ()

    def __post_init__(self):
        for i in self.pinned:
            if not 0 <= i < min(self.n_in, self.n_out):
                raise ValidationError(
                    f"pinned index {i} must address both an input and an output"
                )
        if len(set(self.pinned)) != len(self.pinned):
            raise ValidationError("pinned indices must be unique")
        if self.n_out - len(self.pinned) < 0:
            raise ValidationError("more pinned outputs than outputs")


def _core_layers(spec: MlpSpec, n_free: int) -> nn.Sequential:
    layers = []
    width_in = spec.n_in
    for width in spec.hidden:
        layers.append(nn.Linear(width_in, width))
        if spec.layer_norm:
            layers.append(nn.LayerNorm(width))
        layers.append(nn.ELU(alpha=1.0))
        width_in = width
    layers.append(nn.Linear(width_in, n_free))
    return nn.Sequential(*layers).double()


class PinnedMlp(nn.Module):
    """MLP whose pinned output slots return the matching input coordinate."""

    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        self.n_free = spec.n_out - len(spec.pinned)
        self.net = _core_layers(spec, self.n_free) if self.n_free else None

    def forward(self, x):
        free = self.net(x) if self.net is not None else None
        cols = []
        k = 0
        pinned = set(self.spec.pinned)
        for i in range(self.spec.n_out):
            if i in pinned:
                cols.append(x[:, i])
            else:
                cols.append(free[:, k])
                k += 1
        return torch.stack(cols, dim=1)


class MatrixMlp(nn.Module):
    """MLP producing an (n_rows, n_cols) matrix per sample."""

    def __init__(self, spec: MlpSpec, n_rows: int, n_cols: int):
        super().__init__()
        if spec.n_out != n_rows * n_cols or spec.pinned:
            raise ValidationError("matrix net needs n_out = n_rows * n_cols, no pinning")
        self.spec = spec
        self.n_rows = n_rows
        self.n_cols = n_cols
        self.net = _core_layers(spec, spec.n_out)

    def forward(self, u):
        return self.net(u).reshape(-1, self.n_rows, self.n_cols)


# ---------------------------------------------------------------------------
# Training configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe and architecture knobs.

    Defaults are desk scale (small widths, 100 epochs) so experiments stay
    interactive; paper_scale() restores the full-size recipe.  g_rows only
    matters for the separable class, where n_psi = n_h + g_rows.
    """

    n_h: int = 5
    g_rows: int = 5
    hidden: tuple = (32, 32)
    pinned: tuple = (0, 1)
    epochs: int = 100
    batch_size: int = 100
    lr_peak: float = 1e-3
    lr_floor: float = 1e-7
    warmup_epochs: int = 10
    betas: tuple = (0.9, 0.999)
    alpha_cond: float = 1e-5
    alpha_cond_h: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr_floor > self.lr_peak:
            raise ValidationError("lr_floor must not exceed lr_peak")
        if not 0 < self.warmup_epochs <= self.epochs:
            raise ValidationError("warmup_epochs must lie in (0, epochs]")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValidationError("epochs and batch_size must be positive")
        if self.n_h < len(self.pinned) or self.g_rows < 1:
            raise ValidationError("n_h must cover pinned outputs; g_rows >= 1")

    def paper_scale(self) -> "TrainConfig":
        """Full-size recipe: 64-wide, 4 hidden layers, 500 epochs, 50 warmup."""
        return replace(self, hidden=(64, 64, 64, 64), epochs=500, warmup_epochs=50)


def lr_schedule(epoch, config: TrainConfig) -> float:
    """Linear warmup floor -> peak, then cosine anneal peak -> floor.

    Defined on 0 <= epoch <= epochs; the endpoint value is the floor (the
    final optimizer step uses epoch = epochs - 1).
    """
    if not 0 <= epoch <= config.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {config.epochs}]")
    span = config.lr_peak - config.lr_floor
    if epoch <= config.warmup_epochs:
        return config.lr_floor + span * epoch / config.warmup_epochs
    progress = (epoch - config.warmup_epochs) / (config.epochs - config.warmup_epochs)
    return config.lr_floor + span * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Parametric basis
# ---------------------------------------------------------------------------

class ParametricBasis:
    """Trainable normal basis for one model class.

    separable : H and a matrix-valued G are both networks.
    bilinear  : H is a network, G(u) = [u_1 I; ...; u_m I] is fixed.
    linear    : H is a network with the constant appended, G(u) = [0, u].

    n_h below is the final dictionary size (constant included for the linear
    class); the state net then has n_h - 1 outputs.
    """

    def __init__(self, model_class, n, m, config: TrainConfig):
        if model_class not in MODEL_CLASSES:
            raise ValidationError(
                f"unknown model class {model_class!r}; choose from {MODEL_CLASSES}"
            )
        self.model_class = model_class
        self.n = int(n)
        self.m = int(m)
        self.n_h = config.n_h
        self.config = config

        net_out = self.n_h - 1 if model_class == "linear" else self.n_h
        self.h_spec = MlpSpec(n_in=self.n, hidden=config.hidden, n_out=net_out,
                              pinned=config.pinned)
        self.h_net = PinnedMlp(self.h_spec)

        if model_class == "separable":
            self.g_rows = config.g_rows
            self.g_spec = MlpSpec(n_in=self.m, hidden=config.hidden,
                                  n_out=self.g_rows * self.n_h)
            self.g_net = MatrixMlp(self.g_spec, self.g_rows, self.n_h)
        else:
            self.g_rows = self.m * self.n_h if model_class == "bilinear" else self.m
            self.g_spec = None
            self.g_net = None
        self.n_psi = self.n_h + self.g_rows

    # -- parameter access ---------------------------------------------------

    def phi_parameters(self):
        return list(self.h_net.parameters())

    def theta_parameters(self):
        return list(self.g_net.parameters()) if self.g_net is not None else []

    def parameters(self):
        return self.phi_parameters() + self.theta_parameters()

    def initialize_input_scaling(self, data: SnapshotDataset) -> None:
        """Fold training-input statistics into the first layers at init.

        Raw state coordinates can differ by orders of magnitude; a plain
        fan-in uniform first layer then feeds layer normalization one
        dominant direction and the free dictionary rows start nearly
        collinear, tripping the batch rank guard before any step is taken.
        Centering and scaling each input column removes that failure mode.
        The rescaled weights stay trainable; constant columns keep scale 1.
        """
        train = data.train
        for net, values in ((self.h_net, train.x), (self.g_net, train.u)):
            seq = getattr(net, "net", None) if net is not None else None
            if seq is None:
                continue
            mu = torch.as_tensor(values.mean(axis=1))
            sd = values.std(axis=1)
            sd = torch.as_tensor(np.where(sd > 0, sd, 1.0))
            first = seq[0]
            with torch.no_grad():
                first.weight /= sd[None, :]
                first.bias -= first.weight @ mu

    # -- evaluation ---------------------------------------------------------

    def state_rows(self, x):
        """Dictionary evaluations as rows, (N, n_h); x is (N, n)."""
        hx = self.h_net(x)
        if self.model_class == "linear":
            ones = torch.ones(x.shape[0], 1, dtype=x.dtype)
            hx = torch.cat([hx, ones], dim=1)
        return hx

    def matrices(self, x, u, xplus):
        """Regression pair (J, L) = (H(X+), Psi(X, U)) as torch matrices."""
        hx = self.state_rows(x)
        j = self.state_rows(xplus)
        if self.model_class == "linear":
            bottom = u
        elif self.model_class == "bilinear":
            bottom = (u.unsqueeze(2) * hx.unsqueeze(1)).reshape(x.shape[0], -1)
        else:
            bottom = torch.einsum("nrh,nh->nr", self.g_net(u), hx)
        return j.T, torch.cat([hx, bottom], dim=1).T

    # -- freezing -----------------------------------------------------------

    def freeze(self) -> NormalBasis:
        """Immutable numpy-facing snapshot of the current parameters."""
        if self.model_class == "linear":
            return make_lifted_linear(NeuralDictionary(self.h_net), self.m)
        if self.model_class == "bilinear":
            return make_bilinear(NeuralDictionary(self.h_net), self.m)
        return NormalBasis(
            NeuralDictionary(self.h_net), NeuralInputFactor(self.g_net, self.m)
        )


def build_parametric(model_class, n, m, config: TrainConfig) -> ParametricBasis:
    """Seeded construction; initialization is torch's fan-in uniform scheme."""
    torch.manual_seed(config.seed)
    return ParametricBasis(model_class, n, m, config)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _guard_spd(s, name, limit=COND_LIMIT):
    """Cholesky with a condition-number trip wire on the (small) Gram matrix."""
    with torch.no_grad():
        w = torch.linalg.eigvalsh(s)
        lo, hi = float(w[0]), float(w[-1])
        cond = hi / lo if lo > 0 else float("inf")
    if not math.isfinite(cond) or cond > limit:
        raise RankDeficiencyError(name, cond, limit)
    return torch.linalg.cholesky(s)


def trace_term(j, l) -> torch.Tensor:
    """tr(M_CC) = n_h - tr((JJ')^{-1} C' (LL')^{-1} C) with C = L J'."""
    n_h = j.shape[0]
    c = l @ j.T
    cho_l = _guard_spd(l @ l.T, "Psi(X, U) batch")
    cho_j = _guard_spd(j @ j.T, "H(X+) batch")
    inner = c.T @ torch.cholesky_solve(c, cho_l)
    return n_h - torch.trace(torch.cholesky_solve(inner, cho_j))


def cond_surrogate(mat) -> torch.Tensor:
    """Smooth proxy sqrt(tr(MM') tr((MM')^{-1})) / n_rows for cond_2(M).

    Equals 1 exactly when MM' is a multiple of the identity and upper-bounds
    cond_2 / n_rows otherwise; differentiable through the same Cholesky path
    as the trace term.
    """
    n_rows = mat.shape[0]
    gram = mat @ mat.T
    cho = _guard_spd(gram, "condition surrogate")
    eye = torch.eye(n_rows, dtype=mat.dtype)
    inv_trace = torch.trace(torch.cholesky_solve(eye, cho))
    return torch.sqrt(torch.trace(gram) * inv_trace) / n_rows


def loss_from_matrices(j, l, config: TrainConfig) -> torch.Tensor:
    value = trace_term(j, l) + config.alpha_cond * cond_surrogate(l)
    if config.alpha_cond_h:
        value = value + config.alpha_cond_h * cond_surrogate(j)
    return value


def _batch_tensors(batch):
    if isinstance(batch, SnapshotDataset):
        x, u, xp = batch.x, batch.u, batch.xplus
    else:
        x, u, xp = batch
    as_t = lambda a: torch.as_tensor(np.asarray(a, dtype=float).T)
    return as_t(x), as_t(u), as_t(xp)


def loss(pb: ParametricBasis, batch, config: Optional[TrainConfig] = None) -> torch.Tensor:
    """Training loss tr(M_CC) + alpha * cond surrogate on one batch.

    Differentiable in the network parameters; raises RankDeficiencyError when
    the batch violates the rank condition (callers may skip such batches).
    """
    config = config or pb.config
    x, u, xp = _batch_tensors(batch)
    j, l = pb.matrices(x, u, xp)
    return loss_from_matrices(j, l, config)


def loss_parts(pb: ParametricBasis, batch, config: Optional[TrainConfig] = None) -> dict:
    """Diagnostic breakdown; reports the exact 2-norm condition numbers too."""
    config = config or pb.config
    x, u, xp = _batch_tensors(batch)
    with torch.no_grad():
        j, l = pb.matrices(x, u, xp)
        parts = {
            "trace_term": float(trace_term(j, l)),
            "cond_surrogate_psi": float(cond_surrogate(l)),
            "cond2_psi": float(torch.linalg.cond(l, 2)),
            "cond2_h": float(torch.linalg.cond(j, 2)),
        }
    parts["loss"] = parts["trace_term"] + config.alpha_cond * parts["cond_surrogate_psi"]
    if config.alpha_cond_h:
        with torch.no_grad():
            parts["cond_surrogate_h"] = float(cond_surrogate(j))
        parts["loss"] += config.alpha_cond_h * parts["cond_surrogate_h"]
    return parts


def flatten_parameters(params) -> np.ndarray:
    """Current values of a parameter list as one float64 vector."""
    if not params:
        return np.zeros(0)
    return torch.cat([p.detach().reshape(-1) for p in params]).numpy().copy()


def assign_parameters(params, vec) -> None:
    """Write a flat vector back into a parameter list, in order."""
    vec = np.asarray(vec, dtype=float)
    offset = 0
    with torch.no_grad():
        for p in params:
            size = p.numel()
            p.copy_(torch.as_tensor(vec[offset : offset + size]).reshape(p.shape))
            offset += size
    if offset != vec.size:
        raise ValidationError(f"parameter vector has {vec.size} entries, needs {offset}")


def loss_gradient(pb: ParametricBasis, batch, config: Optional[TrainConfig] = None):
    """Reverse-mode gradient of the loss, as flat (phi, theta) vectors.

    theta is an empty vector for the fixed-structure classes.
    """
    for p in pb.parameters():
        p.grad = None
    value = loss(pb, batch, config)
    value.backward()

    def grab(params):
        if not params:
            return np.zeros(0)
        return torch.cat([
            (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
            for p in params
        ]).numpy().copy()

    return grab(pb.phi_parameters()), grab(pb.theta_parameters())


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model_class: str
    basis: NormalBasis
    fitted: FittedModel
    reports: dict
    history: list
    config: TrainConfig

    @property
    def rrmse_max(self) -> dict:
        return {split: rep.rrmse_max for split, rep in self.reports.items()}


def train(
    data: SnapshotDataset,
    model_class: str,
    config: TrainConfig,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
    log=None,
) -> TrainResult:
    """Adam loop over shuffled batches of the training split.

    After the last epoch the networks are frozen, the top block is refit on
    the full training split, and certificates are computed on both splits.
    Deterministic for a fixed seed (single-threaded CPU math).  Batches that
    trip the rank guard are skipped and counted; trailing batches smaller
    than n_psi + 1 are dropped outright.
    """
    pb = build_parametric(model_class, data.n, data.m, config)
    if config.batch_size <= pb.n_psi:
        raise ValidationError(
            f"batch_size {config.batch_size} must exceed n_psi = {pb.n_psi}"
        )
    train_split = data.train
    if train_split.n_snapshots <= pb.n_psi:
        raise ValidationError("training split smaller than the lifted dimension")
    pb.initialize_input_scaling(data)

    # fully pinned nets have nothing to optimize; go straight to the refit
    if not pb.parameters():
        basis = pb.freeze()
        fitted = fit_top_block(basis, train_split)
        reports = {"train": certify(basis, train_split)}
        if data.n_test:
            reports["test"] = certify(basis, data.test)
        return TrainResult(model_class, basis, fitted, reports, [], config)

    x_t, u_t, xp_t = _batch_tensors(train_split)
    optimizer = torch.optim.Adam(pb.parameters(), lr=config.lr_floor, betas=config.betas)
    shuffler = torch.Generator().manual_seed(config.seed + 1)
    n_train = train_split.n_snapshots
    history = []
    total_steps = 0

    for epoch in range(config.epochs):
        rate = lr_schedule(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = rate
        perm = torch.randperm(n_train, generator=shuffler)
        epoch_loss, n_batches, skipped = 0.0, 0, 0
        for start in range(0, n_train, config.batch_size):
            idx = perm[start : start + config.batch_size]
            if idx.shape[0] <= pb.n_psi:
                break
            optimizer.zero_grad(set_to_none=True)
            try:
                j, l = pb.matrices(x_t[idx], u_t[idx], xp_t[idx])
                value = loss_from_matrices(j, l, config)
            except RankDeficiencyError:
                skipped += 1
                continue
            if not torch.isfinite(value):
                raise DivergenceError(epoch, n_batches)
            value.backward()
            optimizer.step()
            epoch_loss += float(value.detach())
            n_batches += 1
            total_steps += 1
        history.append({
            "epoch": epoch,
            "lr": rate,
            "loss": epoch_loss / n_batches if n_batches else float("nan"),
            "batches": n_batches,
            "skipped": skipped,
        })
        if log is not None:
            log(history[-1])
        if checkpoint_dir and checkpoint_every > 0 and (epoch + 1) % checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"checkpoint-{epoch + 1:04d}.json"
            path.write_text(json.dumps(pb.freeze().to_spec(), sort_keys=True))

    if total_steps == 0:
        raise NumericalError("every batch tripped the rank guard; no training happened")

    basis = pb.freeze()
    fitted = fit_top_block(basis, train_split)
    reports = {"train": certify(basis, train_split)}
    if data.n_test:
        reports["test"] = certify(basis, data.test)
    return TrainResult(model_class, basis, fitted, reports, history, config)


# ---------------------------------------------------------------------------
# Frozen numpy-facing wrappers
# ---------------------------------------------------------------------------

def _clone_module(module):
    clone = copy.deepcopy(module)
    for p in clone.parameters():
        p.requires_grad_(False)
    clone.eval()
    return clone


class NeuralDictionary(StateDictionary):
    """Frozen pinned MLP as a state dictionary (float64, no autograd)."""

    kind = "neural"

    def __init__(self, net: PinnedMlp):
        self.net = _clone_module(net)
        self.n = net.spec.n_in
        self.n_h = net.spec.n_out

    def evaluate(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        with torch.no_grad():
            out = self.net(torch.as_tensor(X.T))
        return out.numpy().T

    def to_spec(self):
        return {
            "kind": self.kind,
            "n": self.n,
            "params": {
                "mlp": _mlp_to_spec(self.net.spec),
                "state_dict": _state_dict_to_json(self.net),
            },
        }


class NeuralInputFactor(InputFactor):
    """Frozen matrix MLP as an input factor."""

    structure = "neural"

    def __init__(self, net: MatrixMlp, m: int):
        self.net = _clone_module(net)
        self.m = int(m)
        self.n_h = net.n_cols
        self.n_rows = net.n_rows

    def evaluate(self, u):
        u = self._check_u(u)
        with torch.no_grad():
            out = self.net(torch.as_tensor(u[None, :]))
        return out[0].numpy()

    def apply(self, U, HX):
        U = np.asarray(U, dtype=float)
        if U.ndim == 1:
            U = U[:, None]
        with torch.no_grad():
            g_all = self.net(torch.as_tensor(U.T)).numpy()
        return np.einsum("irh,hi->ri", g_all, HX)

    def to_spec(self):
        return {
            "structure": self.structure,
            "m": self.m,
            "n_h": self.n_h,
            "n_rows": self.n_rows,
            "params": {
                "mlp": _mlp_to_spec(self.net.spec),
                "state_dict": _state_dict_to_json(self.net),
            },
        }


# ---------------------------------------------------------------------------
# Neural spec serialization
# ---------------------------------------------------------------------------

def _mlp_to_spec(spec: MlpSpec) -> dict:
    return {
        "n_in": spec.n_in,
        "hidden": list(spec.hidden),
        "n_out": spec.n_out,
        "layer_norm": spec.layer_norm,
        "pinned": list(spec.pinned),
    }


def _mlp_from_spec(d: dict) -> MlpSpec:
    return MlpSpec(
        n_in=d["n_in"],
        hidden=tuple(d["hidden"]),
        n_out=d["n_out"],
        layer_norm=d.get("layer_norm", True),
        pinned=tuple(d.get("pinned", ())),
    )


def _state_dict_to_json(module) -> dict:
    out = {}
    for name, tensor in module.state_dict().items():
        out[name] = {
            "shape": list(tensor.shape),
            "data": tensor.reshape(-1).tolist(),
        }
    return out


def _load_state_dict_json(module, payload) -> None:
    state = {}
    for name, entry in payload.items():
        state[name] = torch.as_tensor(
            np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
        )
    module.load_state_dict(state)


def neural_dictionary_from_spec(spec: dict) -> NeuralDictionary:
    params = spec["params"]
    net = PinnedMlp(_mlp_from_spec(params["mlp"]))
    _load_state_dict_json(net, params["state_dict"])
    return NeuralDictionary(net)


def neural_factor_from_spec(spec: dict) -> NeuralInputFactor:
    params = spec["params"]
    net = MatrixMlp(_mlp_from_spec(params["mlp"]), spec["n_rows"], spec["n_h"])
    _load_state_dict_json(net, params["state_dict"])
    return NeuralInputFactor(net, spec["m"])
