"""Snapshot data and least-squares identification of lifted models.

All regressions reduce to one closed form: for a wide full-row-rank matrix M,
M+ = M^T (M M^T)^{-1}, evaluated with a Cholesky solve on the small Gram
matrix.  Rank deficiency is detected on the Gram spectrum and reported, never
silently regularized.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .dictionary import NormalBasis
from .errors import RankDeficiencyError, ValidationError

# A Gram matrix with condition number above this is treated as rank deficient.
COND_LIMIT = 1e10


# ---------------------------------------------------------------------------
# Guarded SPD linear algebra
# ---------------------------------------------------------------------------

def gram_cond(s) -> float:
    """Condition number of a symmetric PSD matrix, +inf if not PD."""
    w = np.linalg.eigvalsh(s)
    if w[0] <= 0 or not np.all(np.isfinite(w)):
        return np.inf
    return float(w[-1] / w[0])


def spd_solve(s, b, name, limit=COND_LIMIT):
    """Solve s @ x = b for symmetric positive definite s, with a rank guard.

    Raises RankDeficiencyError if cond(s) exceeds `limit`.
    """
    cond = gram_cond(s)
    if cond > limit:
        raise RankDeficiencyError(name, cond, limit)
    c, low = scipy.linalg.cho_factor(s)
    return scipy.linalg.cho_solve((c, low), b)


def pinv_full_row_rank(m, name, limit=COND_LIMIT):
    """Moore-Penrose pseudoinverse of a full-row-rank matrix.

    Uses M+ = M^T (M M^T)^{-1}; never forms an SVD.  `name` labels the
    matrix in rank-deficiency errors.
    """
    m = np.asarray(m, dtype=float)
    if m.shape[0] > m.shape[1]:
        # fewer columns than rows: full row rank is impossible
        raise RankDeficiencyError(name, np.inf, limit)
    return spd_solve(m @ m.T, m, name, limit).T


# ---------------------------------------------------------------------------
# Snapshot datasets
# ---------------------------------------------------------------------------

@dataclass
class SnapshotDataset:
    """Paired one-step transitions (x_i, u_i) -> xplus_i, columnwise.

    `train_mask` marks the training split; the complement is the test split.
    `meta` carries provenance (system tag, dt, seed, protocol) and is saved
    alongside the data.
    """

    x: np.ndarray
    u: np.ndarray
    xplus: np.ndarray
    train_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.xplus = np.atleast_2d(np.asarray(self.xplus, dtype=float))
        self.train_mask = np.asarray(self.train_mask, dtype=bool)
        n_snap = self.x.shape[1]
        if n_snap < 1:
            raise ValidationError("dataset needs at least one snapshot")
        if self.xplus.shape != self.x.shape:
            raise ValidationError(
                f"x and xplus shapes differ: {self.x.shape} vs {self.xplus.shape}"
            )
        if self.u.shape[1] != n_snap or self.train_mask.shape != (n_snap,):
            raise ValidationError("x, u, xplus, train_mask must share snapshot count")

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def m(self):
        return self.u.shape[0]

    @property
    def n_snapshots(self):
        return self.x.shape[1]

    @property
    def n_train(self):
        return int(self.train_mask.sum())

    @property
    def n_test(self):
        return int((~self.train_mask).sum())

    def subset(self, mask) -> "SnapshotDataset":
        mask = np.asarray(mask, dtype=bool)
        return SnapshotDataset(
            self.x[:, mask], self.u[:, mask], self.xplus[:, mask],
            np.ones(int(mask.sum()), dtype=bool), dict(self.meta),
        )

    @property
    def train(self) -> "SnapshotDataset":
        return self.subset(self.train_mask)

    @property
    def test(self) -> "SnapshotDataset":
        return self.subset(~self.train_mask)

    def save(self, path):
        """Write snapshots as CSV plus a JSON metadata sidecar."""
        path = Path(path)
        header = (
            [f"x{i + 1}" for i in range(self.n)]
            + [f"u{i + 1}" for i in range(self.m)]
            + [f"xplus{i + 1}" for i in range(self.n)]
            + ["split"]
        )
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(self.n_snapshots):
                row = (
                    [repr(float(v)) for v in self.x[:, i]]
                    + [repr(float(v)) for v in self.u[:, i]]
                    + [repr(float(v)) for v in self.xplus[:, i]]
                    + ["train" if self.train_mask[i] else "test"]
                )
                writer.writerow(row)
        sidecar = {
            "n": self.n, "m": self.m, "n_snapshots": self.n_snapshots,
            "n_train": self.n_train, "n_test": self.n_test, "meta": self.meta,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SnapshotDataset":
        path = Path(path)
        sidecar_path = path.with_suffix(".json")
        if not path.exists() or not sidecar_path.exists():
            raise ValidationError(f"dataset {path} or its JSON sidecar is missing")
        sidecar = json.loads(sidecar_path.read_text())
        n, m = sidecar["n"], sidecar["m"]
        raw = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=str)
        raw = np.atleast_2d(raw)
        if raw.shape[1] != 2 * n + m + 1:
            raise ValidationError(
                f"dataset {path}: expected {2 * n + m + 1} columns, got {raw.shape[1]}"
            )
        vals = raw[:, : 2 * n + m].astype(float).T
        return cls(
            x=vals[:n], u=vals[n : n + m], xplus=vals[n + m :],
            train_mask=(raw[:, -1] == "train"), meta=sidecar.get("meta", {}),
        )


# ---------------------------------------------------------------------------
# EDMD
# ---------------------------------------------------------------------------

@dataclass
class FittedModel:
    """Top-block regression result: H(x+) ~ A11 H(x) + A12 G(u) H(x)."""

    basis: NormalBasis
    a11: np.ndarray
    a12: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def a_top(self) -> np.ndarray:
        return np.hstack([self.a11, self.a12])

    def to_payload(self) -> dict:
        return {
            "n_H": self.basis.n_h,
            "n_Psi": self.basis.n_psi,
            "a11": self.a11.tolist(),
            "a12": self.a12.tolist(),
            "diagnostics": dict(self.diagnostics),
            "state_rows": "H rows 1..n are the raw state coordinates where pinned",
        }

    @classmethod
    def from_payload(cls, payload: dict, basis: NormalBasis) -> "FittedModel":
        a11 = np.asarray(payload["a11"], dtype=float)
        a12 = np.asarray(payload["a12"], dtype=float)
        if a11.shape != (basis.n_h, basis.n_h) or a12.shape != (
            basis.n_h, basis.n_psi - basis.n_h,
        ):
            raise ValidationError("model blocks do not match the basis dimensions")
        return cls(basis, a11, a12, dict(payload.get("diagnostics", {})))


def design_matrices(basis: NormalBasis, data: SnapshotDataset):
    """The regression pair (J, L) = (H(X+), Psi(X, U))."""
    j = basis.h.evaluate(data.xplus)
    l = basis.evaluate(data.x, data.u)
    return j, l


def fit_top_block(basis: NormalBasis, data: SnapshotDataset) -> FittedModel:
    """Least-squares fit of the predictive top block [A11, A12] = J L+."""
    j, l = design_matrices(basis, data)
    a_top = j @ pinv_full_row_rank(l, "Psi(X, U)")
    n_h = basis.n_h
    resid = float(np.linalg.norm(a_top @ l - j))
    diagnostics = {
        "n_snapshots": data.n_snapshots,
        "cond_psi": float(np.sqrt(gram_cond(l @ l.T))),
        "cond_h": float(np.sqrt(gram_cond(j @ j.T))),
        "residual": resid,
        "relative_residual": resid / max(np.linalg.norm(j), 1e-300),
    }
    return FittedModel(basis, a_top[:, :n_h], a_top[:, n_h:], diagnostics)


def edmd_full(basis: NormalBasis, data: SnapshotDataset) -> np.ndarray:
    """Full square EDMD matrix A = Psi(X+, U) Psi(X, U)+, shape (n_psi, n_psi).

    Only its top n_h rows enter prediction; they coincide with the
    fit_top_block result because both right-multiply the same pseudoinverse.
    """
    l = basis.evaluate(data.x, data.u)
    lplus = basis.evaluate(data.xplus, data.u)
    return lplus @ pinv_full_row_rank(l, "Psi(X, U)")


def forward_backward_matrices(j, l):
    """Forward and backward regressions (A_f, A_b) = (J L+, L J+).

    J is (n_h, N) with full row rank, L is (n_psi, N) with full row rank;
    A_f predicts the next dictionary state, A_b maps it back onto the lifted
    basis evaluation.
    """
    j = np.asarray(j, dtype=float)
    l = np.asarray(l, dtype=float)
    if j.shape[1] != l.shape[1]:
        raise ValidationError(
            f"J and L must share columns, got {j.shape} and {l.shape}"
        )
    a_f = j @ pinv_full_row_rank(l, "Psi(X, U)")
    a_b = l @ pinv_full_row_rank(j, "H(X+)")
    return a_f, a_b


def forward_backward(basis: NormalBasis, data: SnapshotDataset):
    """Forward/backward regression pair evaluated on a dataset."""
    j, l = design_matrices(basis, data)
    return forward_backward_matrices(j, l)
