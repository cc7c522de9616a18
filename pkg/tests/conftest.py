"""Shared generators for randomized tests.

All randomness is seeded by the caller; helpers only consume a Generator so
every test is reproducible in isolation.
"""

import numpy as np

from kcfcert.dictionary import (
    CallableDictionary,
    CallableInputFactor,
    NormalBasis,
)
from kcfcert.regression import SnapshotDataset


def random_problem(rng, n_h=None, n_psi=None, n_snap=None, max_cond=1e8):
    """Random full-row-rank regression pair (J, L).

    Dimension ranges follow the certified regime: n_h in 2..6,
    n_psi in n_h+1..12, n_snap in n_psi+1..60.
    """
    n_h = n_h if n_h is not None else int(rng.integers(2, 7))
    n_psi = n_psi if n_psi is not None else int(rng.integers(n_h + 1, 13))
    n_snap = n_snap if n_snap is not None else int(rng.integers(n_psi + 1, 61))
    while True:
        j = rng.normal(size=(n_h, n_snap))
        l = rng.normal(size=(n_psi, n_snap))
        if (np.linalg.cond(j @ j.T) < max_cond
                and np.linalg.cond(l @ l.T) < max_cond):
            return j, l


def random_normal_change(rng, n_h, n_psi, max_cond=50.0):
    """Invertible block-lower-triangular change of basis (zero top-right block)."""
    n_g = n_psi - n_h
    while True:
        r11 = rng.normal(size=(n_h, n_h))
        r22 = rng.normal(size=(n_g, n_g))
        if np.linalg.cond(r11) < max_cond and np.linalg.cond(r22) < max_cond:
            break
    r = np.zeros((n_psi, n_psi))
    r[:n_h, :n_h] = r11
    r[n_h:, :n_h] = rng.normal(size=(n_g, n_h))
    r[n_h:, n_h:] = r22
    return r


def random_basis(rng, n=None, m=None, n_h=None, n_rows=None):
    """Smooth closed-form basis: tanh features with an affine input factor."""
    n = n if n is not None else int(rng.integers(1, 4))
    m = m if m is not None else int(rng.integers(1, 3))
    n_h = n_h if n_h is not None else int(rng.integers(2, 5))
    n_rows = n_rows if n_rows is not None else int(rng.integers(1, 4))
    c1 = rng.normal(size=(n_h, n))
    c0 = rng.normal(size=(n_h, 1))
    h = CallableDictionary(n, n_h, lambda X: np.tanh(c1 @ X + c0) + 0.1 * (c1 @ X))
    g0 = rng.normal(size=(n_rows, n_h))
    gk = rng.normal(size=(m, n_rows, n_h))
    g = CallableInputFactor(
        m, n_h, n_rows, lambda u: g0 + np.tensordot(np.asarray(u), gk, axes=1)
    )
    return NormalBasis(h, g)


def fd_loss_gradient(pb, batch, config, step=1e-5):
    """Central-difference gradient of the training loss, one flat vector.

    Imports lazily so non-learning test modules never pay the torch import.
    """
    from kcfcert.learning import assign_parameters, flatten_parameters, loss

    params = pb.parameters()
    theta0 = flatten_parameters(params)
    grad = np.zeros_like(theta0)
    for k in range(theta0.size):
        for sign in (1.0, -1.0):
            vec = theta0.copy()
            vec[k] += sign * step
            assign_parameters(params, vec)
            grad[k] += sign * float(loss(pb, batch, config).detach())
    assign_parameters(params, theta0)
    return grad / (2.0 * step)


def random_dataset(rng, n, m, n_snap, train_fraction=1.0):
    """Generic snapshot cloud (successors are unrelated random states)."""
    mask = np.zeros(n_snap, dtype=bool)
    mask[: int(round(train_fraction * n_snap))] = True
    return SnapshotDataset(
        x=rng.normal(size=(n, n_snap)),
        u=rng.uniform(-1.0, 1.0, size=(m, n_snap)),
        xplus=rng.normal(size=(n, n_snap)),
        train_mask=mask,
    )
