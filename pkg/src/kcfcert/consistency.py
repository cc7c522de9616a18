"""Control consistency certificates for lifted regression models.

The consistency matrix M_CC = I - A_f A_b couples the forward regression
(predict the next dictionary state) with the backward one (reconstruct the
lifted basis evaluation from it).  Its spectrum lives in [0, 1], is invariant
under normal changes of basis, and its largest eigenvalue equals the squared
worst-case relative RMSE of one-step prediction over every function the
dictionary can represent.

All certified quantities come from small Gram matrices; the N x N projector
L+ L is never materialized, so certificates stay cheap at large snapshot
counts.  Eigenvalues are always extracted from a symmetric similar matrix,
never from the non-symmetric M_CC directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dictionary import NormalBasis
from .errors import ValidationError
from .regression import (
    FittedModel,
    SnapshotDataset,
    design_matrices,
    gram_cond,
    spd_solve,
)


@dataclass
class ConsistencyReport:
    """Certificate for one dataset under one basis.

    m_cc        : the consistency matrix itself (reporting only)
    eigenvalues : ascending real spectrum from the symmetric similar form
    cci         : largest eigenvalue, clipped to [0, 1]
    rrmse_max   : sqrt(cci); sharp bound on one-step relative RMSE
    trace       : sum of the spectrum; cheap proxy, see trace_proxy
    worst_direction_w : top eigenvector in the orthonormalized row basis of J
    worst_direction   : its pullback v to dictionary coordinates, unit norm;
                        the function v' H attains rrmse_max
    """

    m_cc: np.ndarray
    cci: float
    rrmse_max: float
    eigenvalues: np.ndarray
    trace: float
    worst_direction: np.ndarray
    worst_direction_w: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "cci": self.cci,
            "rrmse_max": self.rrmse_max,
            "trace": self.trace,
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "worst_direction": [float(v) for v in self.worst_direction],
            "diagnostics": dict(self.diagnostics),
        }


def consistency_matrix(a_f, a_b) -> np.ndarray:
    """M_CC = I - A_f A_b from explicit forward/backward regressions."""
    a_f = np.asarray(a_f, dtype=float)
    a_b = np.asarray(a_b, dtype=float)
    n_h = a_f.shape[0]
    if a_b.shape[1] != n_h or a_f.shape[1] != a_b.shape[0]:
        raise ValidationError(
            f"incompatible regression shapes {a_f.shape} and {a_b.shape}"
        )
    return np.eye(n_h) - a_f @ a_b


def consistency_matrix_from_data(j, l) -> np.ndarray:
    """M_CC via Gram matrices only: I - C' (LL')^{-1} C (JJ')^{-1}, C = L J'."""
    j = np.asarray(j, dtype=float)
    l = np.asarray(l, dtype=float)
    c = l @ j.T
    inner = c.T @ spd_solve(l @ l.T, c, "Psi(X, U)")
    return np.eye(j.shape[0]) - spd_solve(j @ j.T, inner.T, "H(X+)").T


def symmetrized(m_cc, j) -> np.ndarray:
    """Conjugate M_CC by (JJ')^{1/2}: same spectrum, symmetric result.

    The matrix square root comes from the eigendecomposition of JJ'; J must
    have full row rank.
    """
    m_cc = np.asarray(m_cc, dtype=float)
    j = np.asarray(j, dtype=float)
    gram = j @ j.T
    cond = gram_cond(gram)
    if not np.isfinite(cond) or cond > 1e10:
        raise ValidationError(f"H(X+) is rank deficient: cond(JJ') = {cond:.3e}")
    w, vecs = np.linalg.eigh(gram)
    root = vecs @ np.diag(np.sqrt(w)) @ vecs.T
    root_inv = vecs @ np.diag(1.0 / np.sqrt(w)) @ vecs.T
    return root_inv @ m_cc @ root


def certify_matrices(j, l) -> ConsistencyReport:
    """Certificate from regression matrices J = H(X+), L = Psi(X, U).

    Diagonalizes the symmetric matrix I - Jbar L+ L Jbar', where Jbar holds
    the orthonormalized rows of J (thin QR of J'), so the spectrum is real by
    construction.  The worst direction solves v' J = w' Jbar.
    """
    j = np.asarray(j, dtype=float)
    l = np.asarray(l, dtype=float)
    if j.ndim != 2 or l.ndim != 2 or j.shape[1] != l.shape[1]:
        raise ValidationError(f"J and L must share columns, got {j.shape}, {l.shape}")
    n_h = j.shape[0]

    q = np.linalg.qr(j.T, mode="reduced")[0]
    llt = l @ l.T
    w_mat = l @ q
    m_sym = np.eye(n_h) - w_mat.T @ spd_solve(llt, w_mat, "Psi(X, U)")
    m_sym = 0.5 * (m_sym + m_sym.T)
    eigvals, eigvecs = np.linalg.eigh(m_sym)

    cci = float(np.clip(eigvals[-1], 0.0, 1.0))
    w = eigvecs[:, -1]
    v = spd_solve(j @ j.T, (j @ q) @ w, "H(X+)")
    v /= np.linalg.norm(v)
    if v[np.argmax(np.abs(v))] < 0:
        v, w = -v, -w

    m_cc = consistency_matrix_from_data(j, l)
    raw = np.linalg.eigvals(m_cc)
    diagnostics = {
        "cci_raw": float(eigvals[-1]),
        "max_imag_raw_spectrum": float(np.max(np.abs(raw.imag))),
        "cond_gram_psi": gram_cond(llt),
        "cond_gram_h": gram_cond(j @ j.T),
        "n_snapshots": int(j.shape[1]),
    }
    return ConsistencyReport(
        m_cc=m_cc,
        cci=cci,
        rrmse_max=float(np.sqrt(cci)),
        eigenvalues=eigvals,
        trace=float(eigvals.sum()),
        worst_direction=v,
        worst_direction_w=w,
        diagnostics=diagnostics,
    )


def certify(basis: NormalBasis, data: SnapshotDataset) -> ConsistencyReport:
    """Certificate of a basis on a snapshot dataset (all rows of `data`)."""
    j, l = design_matrices(basis, data)
    return certify_matrices(j, l)


def trace_bounds(trace, n_h):
    """Sandwich trace/n_h <= CCI <= trace implied by the [0, 1] spectrum."""
    if n_h < 1:
        raise ValidationError("n_h must be positive")
    return float(trace) / n_h, float(trace)


def trace_proxy(m_cc):
    """(trace, lower, upper): trace of M_CC and the CCI bracket it implies."""
    m_cc = np.asarray(m_cc, dtype=float)
    trace = float(np.trace(m_cc))
    lower, upper = trace_bounds(trace, m_cc.shape[0])
    return trace, lower, upper


def trace_from_data(j, l):
    """trace_proxy straight from (J, L) via two SPD solves, no eigensolve.

    This is the numpy twin of the differentiable training-loss trace term.
    """
    j = np.asarray(j, dtype=float)
    l = np.asarray(l, dtype=float)
    n_h = j.shape[0]
    c = l @ j.T
    inner = c.T @ spd_solve(l @ l.T, c, "Psi(X, U)")
    trace = n_h - float(np.trace(spd_solve(j @ j.T, inner.T, "H(X+)").T))
    lower, upper = trace_bounds(trace, n_h)
    return trace, lower, upper


def rrmse_of_directions(v, j, l) -> np.ndarray:
    """Relative RMSE of the optimal one-step predictor per direction column.

    `v` has one dictionary-space direction per column, shape (n_h, k).  For
    each column the truth is v' J and the least-squares prediction from the
    same data is its projection v' J L+ L.  Returns a length-k vector.
    Vectorized; safe for very many directions at once.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    j = np.asarray(j, dtype=float)
    l = np.asarray(l, dtype=float)
    rows = v.T @ j
    proj = spd_solve(l @ l.T, l @ rows.T, "Psi(X, U)").T @ l
    truth_norm = np.linalg.norm(rows, axis=1)
    if np.any(truth_norm == 0):
        raise ValidationError("direction with zero norm on the data")
    return np.linalg.norm(rows - proj, axis=1) / truth_norm


def rrmse_of_function(v, model: FittedModel, data: SnapshotDataset) -> float:
    """Relative RMSE of predicting the function v' H with a fitted model.

    Truth is v' H(X+); the prediction is v' [A11, A12] Psi(X, U).  When the
    model was fit on `data` itself this equals the optimal projection
    residual of rrmse_of_directions.
    """
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != model.basis.n_h:
        raise ValidationError(
            f"direction has length {v.shape[0]}, expected {model.basis.n_h}"
        )
    j, l = design_matrices(model.basis, data)
    truth = v @ j
    denom = np.linalg.norm(truth)
    if denom == 0:
        raise ValidationError("the function v' H vanishes on all successor states")
    pred = v @ (model.a_top @ l)
    return float(np.linalg.norm(truth - pred) / denom)
