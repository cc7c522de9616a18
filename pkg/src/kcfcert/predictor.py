"""Multi-step prediction in lifted coordinates and rollout error summaries.

A fitted top block advances z+ = A11 z + A12 G(u) z.  For the structured
families this specializes to the standard forms: z+ = A11 z + A12 u
(lifted linear) and z+ = A11 z + sum_i u_i B_i z (bilinear); the input
factor never has to be evaluated inside the rollout loop for those.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import NumericalError, ValidationError
from .regression import FittedModel

# Relative errors divide by max(|truth|, this floor) so zero crossings of an
# observable do not blow up the statistic.
REL_ERROR_FLOOR = 1e-8


@dataclass
class RolloutResult:
    """Predicted lifted trajectory plus, when truth is known, its errors.

    z column 0 is H(x0) exactly; all arrays have T + 1 columns.  errors are
    componentwise |z - z_true| / max(|z_true|, floor).
    """

    z: np.ndarray
    z_true: Optional[np.ndarray] = None
    errors: Optional[np.ndarray] = None

    @property
    def horizon(self):
        return self.z.shape[1] - 1


def step(model: FittedModel, z, u) -> np.ndarray:
    """One prediction step from lifted state z under input u."""
    z = np.asarray(z, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    basis = model.basis
    if z.shape[0] != basis.n_h or u.shape[0] != basis.m:
        raise ValidationError(
            f"step expects z of length {basis.n_h} and u of length {basis.m}, "
            f"got {z.shape[0]} and {u.shape[0]}"
        )
    structure = basis.g.structure
    if structure == "lifted-linear":
        return model.a11 @ z + model.a12 @ u
    if structure == "bilinear":
        return model.a11 @ z + model.a12 @ np.kron(u, z)
    return model.a11 @ z + model.a12 @ (basis.g.evaluate(u) @ z)


def relative_errors(z_hat, z_true, floor=REL_ERROR_FLOOR) -> np.ndarray:
    """Componentwise |z_hat - z_true| / max(|z_true|, floor)."""
    z_hat = np.asarray(z_hat, dtype=float)
    z_true = np.asarray(z_true, dtype=float)
    if z_hat.shape != z_true.shape:
        raise ValidationError(
            f"trajectory shapes differ: {z_hat.shape} vs {z_true.shape}"
        )
    return np.abs(z_hat - z_true) / np.maximum(np.abs(z_true), floor)


def rollout(model: FittedModel, x0, u_seq, truth=None) -> RolloutResult:
    """Iterate the predictor from z0 = H(x0) through an input sequence.

    u_seq is (m, T).  `truth`, if given, is the true state trajectory
    (n, T + 1) used to fill the lifted reference and relative errors.
    A zero-length input sequence yields the single lifted initial column.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.ndim == 1:
        u_seq = u_seq[None, :]
    if u_seq.size == 0:
        u_seq = u_seq.reshape(model.basis.m, 0)
    n_steps = u_seq.shape[1]
    z = np.empty((model.basis.n_h, n_steps + 1))
    z[:, 0] = model.basis.h(np.asarray(x0, dtype=float))
    for t in range(n_steps):
        z[:, t + 1] = step(model, z[:, t], u_seq[:, t])
        if not np.all(np.isfinite(z[:, t + 1])):
            raise NumericalError(f"prediction diverged to non-finite values at step {t + 1}")

    if truth is None:
        return RolloutResult(z=z)
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if truth.shape != (model.basis.n, n_steps + 1):
        raise ValidationError(
            f"truth must be (n, T + 1) = {(model.basis.n, n_steps + 1)}, "
            f"got {truth.shape}"
        )
    z_true = model.basis.h.evaluate(truth)
    return RolloutResult(z=z, z_true=z_true, errors=relative_errors(z, z_true))


def function_predict(v, model: FittedModel, x, u) -> np.ndarray:
    """One-step prediction of the scalar function v' H from state-input pairs.

    x is (n, N), u is (m, N); returns the length-N vector
    v' (A11 H(x) + A12 G(u) H(x)).  Single vectors give a length-1 result.
    """
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != model.basis.n_h:
        raise ValidationError(f"direction has length {v.shape[0]}, "
                              f"expected {model.basis.n_h}")
    psi = model.basis.evaluate(x, u)
    return v @ (model.a_top @ psi)


def error_statistics(results) -> dict:
    """Median and quartiles over rollouts, per coordinate and step.

    `results` is a non-empty collection of RolloutResult with errors filled
    (or raw error arrays of equal shape).  Percentiles interpolate linearly
    between order statistics.  Each returned entry has shape (n_h, T + 1).
    """
    arrays = []
    for item in results:
        err = item.errors if isinstance(item, RolloutResult) else np.asarray(item, dtype=float)
        if err is None:
            raise ValidationError("rollout has no error data (no truth was provided)")
        arrays.append(err)
    if not arrays:
        raise ValidationError("no rollouts to aggregate")
    stack = np.stack(arrays)
    return {
        "median": np.percentile(stack, 50, axis=0),
        "q25": np.percentile(stack, 25, axis=0),
        "q75": np.percentile(stack, 75, axis=0),
    }


def write_error_csv(path, stats) -> None:
    """Serialize error statistics as rows (step, coordinate, median, q25, q75)."""
    median = stats["median"]
    n_h, n_cols = median.shape
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "coordinate", "median", "q25", "q75"])
        for t in range(n_cols):
            for i in range(n_h):
                writer.writerow([
                    t, i + 1,
                    repr(float(median[i, t])),
                    repr(float(stats["q25"][i, t])),
                    repr(float(stats["q75"][i, t])),
                ])
