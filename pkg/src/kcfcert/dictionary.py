"""Normal separable bases Psi(x, u) = [H(x); G(u) H(x)].

A basis is an input-independent state dictionary ``H`` (the top block is
always H itself) together with an input factor ``G`` whose rows multiply H.
Structured factors realize the lifted-linear and bilinear model families;
a general factor may be any matrix-valued function of the input.
"""

from __future__ import annotations

import abc

import numpy as np

from .errors import ValidationError

# Acceptance tolerance for the zero top-right block of a change-of-basis
# matrix, relative to ||R||_F.  The block is exactly zero in theory.
R12_REL_TOL = 1e-9


def _as_matrix(arr, rows, what):
    """Coerce to a float64 2-d array with `rows` rows (1-d inputs become one column)."""
    a = np.asarray(arr, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] != rows:
        raise ValidationError(f"{what}: expected {rows} rows, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# State dictionaries
# ---------------------------------------------------------------------------

class StateDictionary(abc.ABC):
    """Vector of real-valued functions of the state.

    Attributes
    ----------
    n : int
        State dimension.
    n_h : int
        Number of dictionary functions.
    kind : str
        One of ``"polynomial"``, ``"analytic-closed-form"``, ``"neural"``,
        or a composition tag.
    """

    n: int
    n_h: int
    kind: str

    @abc.abstractmethod
    def evaluate(self, X) -> np.ndarray:
        """Evaluate on a state matrix X (n, N), returning (n_h, N)."""

    def __call__(self, x) -> np.ndarray:
        """Evaluate at a single state, returning a length-n_h vector."""
        return self.evaluate(_as_matrix(x, self.n, "state"))[:, 0]

    def to_spec(self) -> dict:
        raise ValidationError(f"dictionary of kind {self.kind!r} is not serializable")


class PolynomialDictionary(StateDictionary):
    """Monomial dictionary: each function is prod_j x_j**e_j for one exponent row.

    Covers coordinates (unit exponent rows), the constant function (zero
    row), and arbitrary monomial products.
    """

    kind = "polynomial"

    def __init__(self, n, exponents):
        exps = np.asarray(exponents, dtype=int)
        if exps.ndim != 2 or exps.shape[1] != n:
            raise ValidationError(
                f"exponents must be (n_terms, {n}), got {exps.shape}"
            )
        if np.any(exps < 0):
            raise ValidationError("monomial exponents must be non-negative")
        self.n = int(n)
        self.n_h = exps.shape[0]
        self.exponents = exps

    def evaluate(self, X):
        X = _as_matrix(X, self.n, "state matrix")
        # (n_terms, n, N) -> product over the state axis
        return np.prod(X[None, :, :] ** self.exponents[:, :, None], axis=1)

    @classmethod
    def coordinates(cls, n):
        """The identity dictionary H(x) = x."""
        return cls(n, np.eye(n, dtype=int))

    @classmethod
    def with_constant(cls, n, exponents):
        """Monomials followed by the constant function."""
        exps = np.vstack([np.asarray(exponents, dtype=int), np.zeros((1, n), int)])
        return cls(n, exps)

    def to_spec(self):
        return {"kind": self.kind, "n": self.n,
                "params": {"exponents": self.exponents.tolist()}}


class CallableDictionary(StateDictionary):
    """Wraps an arbitrary matrix-valued callable (n, N) -> (n_h, N)."""

    def __init__(self, n, n_h, fn, kind="analytic-closed-form"):
        self.n = int(n)
        self.n_h = int(n_h)
        self.fn = fn
        self.kind = kind

    def evaluate(self, X):
        X = _as_matrix(X, self.n, "state matrix")
        out = np.asarray(self.fn(X), dtype=float)
        if out.shape != (self.n_h, X.shape[1]):
            raise ValidationError(
                f"dictionary callable returned shape {out.shape}, "
                f"expected {(self.n_h, X.shape[1])}"
            )
        return out


class ConstantAugmentedDictionary(StateDictionary):
    """A base dictionary with the constant function 1 appended as last entry."""

    kind = "constant-augmented"

    def __init__(self, base: StateDictionary):
        self.base = base
        self.n = base.n
        self.n_h = base.n_h + 1

    def evaluate(self, X):
        hx = self.base.evaluate(X)
        return np.vstack([hx, np.ones((1, hx.shape[1]))])

    def to_spec(self):
        return {"kind": self.kind, "n": self.n, "params": {"base": self.base.to_spec()}}


class RecombinedDictionary(StateDictionary):
    """Invertible linear recombination T @ H of a base dictionary."""

    kind = "recombined"

    def __init__(self, transform, base: StateDictionary):
        T = np.asarray(transform, dtype=float)
        if T.shape != (base.n_h, base.n_h):
            raise ValidationError(
                f"recombination must be square {base.n_h}x{base.n_h}, got {T.shape}"
            )
        self.transform = T
        self.base = base
        self.n = base.n
        self.n_h = base.n_h

    def evaluate(self, X):
        return self.transform @ self.base.evaluate(X)


# ---------------------------------------------------------------------------
# Input factors
# ---------------------------------------------------------------------------

class InputFactor(abc.ABC):
    """Matrix-valued function of the input multiplying H in the bottom block.

    ``evaluate(u)`` returns the (n_rows, n_h) factor at one input;
    ``apply(U, HX)`` returns the stacked products G(u_i) H(x_i) for a whole
    dataset, which structured factors override with closed forms.
    """

    m: int
    n_h: int
    n_rows: int
    structure: str

    @abc.abstractmethod
    def evaluate(self, u) -> np.ndarray:
        """Factor matrix (n_rows, n_h) at a single input u."""

    def apply(self, U, HX) -> np.ndarray:
        """Columns G(u_i) @ HX[:, i], shape (n_rows, N)."""
        U = _as_matrix(U, self.m, "input matrix")
        out = np.empty((self.n_rows, U.shape[1]))
        for i in range(U.shape[1]):
            out[:, i] = self.evaluate(U[:, i]) @ HX[:, i]
        return out

    def _check_u(self, u):
        u = np.asarray(u, dtype=float).reshape(-1)
        if u.shape[0] != self.m:
            raise ValidationError(f"input has length {u.shape[0]}, expected {self.m}")
        return u

    def to_spec(self) -> dict:
        raise ValidationError(f"input factor {self.structure!r} is not serializable")


class LiftedLinearFactor(InputFactor):
    """G(u) = [0_{m x (n_h-1)}, u]; the last dictionary slot must be the constant."""

    structure = "lifted-linear"

    def __init__(self, m, n_h):
        if n_h < 1:
            raise ValidationError("lifted-linear factor needs n_h >= 1")
        self.m = int(m)
        self.n_h = int(n_h)
        self.n_rows = int(m)

    def evaluate(self, u):
        u = self._check_u(u)
        g = np.zeros((self.m, self.n_h))
        g[:, -1] = u
        return g

    def apply(self, U, HX):
        U = _as_matrix(U, self.m, "input matrix")
        return U * HX[-1:, :]

    def to_spec(self):
        return {"structure": self.structure, "m": self.m, "n_h": self.n_h, "params": {}}


class BilinearFactor(InputFactor):
    """G(u) = [u_1 I, u_2 I, ..., u_m I]^T stacked row-major."""

    structure = "bilinear"

    def __init__(self, m, n_h):
        self.m = int(m)
        self.n_h = int(n_h)
        self.n_rows = int(m) * int(n_h)

    def evaluate(self, u):
        u = self._check_u(u)
        eye = np.eye(self.n_h)
        return np.vstack([ui * eye for ui in u])

    def apply(self, U, HX):
        U = _as_matrix(U, self.m, "input matrix")
        # row k*n_h + j = u_k * H_j
        return (U[:, None, :] * HX[None, :, :]).reshape(self.n_rows, -1)

    def to_spec(self):
        return {"structure": self.structure, "m": self.m, "n_h": self.n_h, "params": {}}


class CallableInputFactor(InputFactor):
    """Wraps a callable u -> (n_rows, n_h) matrix; the general separable family."""

    def __init__(self, m, n_h, n_rows, fn, structure="general"):
        self.m = int(m)
        self.n_h = int(n_h)
        self.n_rows = int(n_rows)
        self.fn = fn
        self.structure = structure

    def evaluate(self, u):
        u = self._check_u(u)
        g = np.asarray(self.fn(u), dtype=float)
        if g.shape != (self.n_rows, self.n_h):
            raise ValidationError(
                f"input factor callable returned shape {g.shape}, "
                f"expected {(self.n_rows, self.n_h)}"
            )
        return g


class TransformedInputFactor(InputFactor):
    """Gbar(u) = (R21 + R22 G(u)) R11^{-1}, from a change of normal basis."""

    structure = "general"

    def __init__(self, r21, r22, r11_inv, base: InputFactor):
        self.base = base
        self.r21 = np.asarray(r21, dtype=float)
        self.r22 = np.asarray(r22, dtype=float)
        self.r11_inv = np.asarray(r11_inv, dtype=float)
        self.m = base.m
        self.n_h = base.n_h
        self.n_rows = self.r21.shape[0]

    def evaluate(self, u):
        return (self.r21 + self.r22 @ self.base.evaluate(u)) @ self.r11_inv


# ---------------------------------------------------------------------------
# Normal basis
# ---------------------------------------------------------------------------

class NormalBasis:
    """Non-degenerate normal separable basis: Psi(x, u) = [H(x); G(u) H(x)].

    The top n_h entries of any evaluation equal H(x) exactly.  Requires at
    least one factor row (n_psi > n_h), otherwise the model would be
    input-independent.
    """

    def __init__(self, h: StateDictionary, g: InputFactor):
        if g.n_h != h.n_h:
            raise ValidationError(
                f"input factor expects n_h={g.n_h}, dictionary has n_h={h.n_h}"
            )
        if g.n_rows < 1:
            raise ValidationError("degenerate basis: input factor has no rows")
        self.h = h
        self.g = g
        self.n = h.n
        self.m = g.m
        self.n_h = h.n_h
        self.n_psi = h.n_h + g.n_rows

    def evaluate(self, X, U) -> np.ndarray:
        """Psi applied columnwise to paired (X, U), shape (n_psi, N)."""
        X = _as_matrix(X, self.n, "state matrix")
        U = _as_matrix(U, self.m, "input matrix")
        if X.shape[1] != U.shape[1]:
            raise ValidationError(
                f"X has {X.shape[1]} columns but U has {U.shape[1]}"
            )
        hx = self.h.evaluate(X)
        return np.vstack([hx, self.g.apply(U, hx)])

    def __call__(self, x, u):
        return self.evaluate(x, u)[:, 0]

    def to_spec(self) -> dict:
        return {
            "kind": self.h.kind,
            "n": self.n,
            "m": self.m,
            "n_H": self.n_h,
            "n_Psi": self.n_psi,
            "structure": self.g.structure,
            "params": {"state": self.h.to_spec(), "input": self.g.to_spec()},
        }


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def eval_H(h: StateDictionary, X) -> np.ndarray:
    """Column i of the result is H applied to column i of X."""
    return h.evaluate(X)


def eval_G(g: InputFactor, u) -> np.ndarray:
    """The (n_psi - n_h, n_h) factor matrix at input u."""
    return g.evaluate(u)


def eval_psi(basis: NormalBasis, X, U) -> np.ndarray:
    """Column i of the result is [H(x_i); G(u_i) H(x_i)]."""
    return basis.evaluate(X, U)


def make_lifted_linear(h_bar: StateDictionary, m) -> NormalBasis:
    """Basis whose separable model is the lifted linear model z+ = A11 z + A12 u.

    Appends the constant function to ``h_bar`` and uses the factor
    G(u) = [0, u]; ``h_bar`` must not already contain a declared constant slot.
    """
    h = ConstantAugmentedDictionary(h_bar)
    return NormalBasis(h, LiftedLinearFactor(m, h.n_h))


def make_bilinear(h: StateDictionary, m) -> NormalBasis:
    """Basis whose separable model is bilinear: z+ = A11 z + sum_i u_i B_i z."""
    return NormalBasis(h, BilinearFactor(m, h.n_h))


def change_of_basis(basis: NormalBasis, R) -> NormalBasis:
    """Rewrite the basis as Psibar = R Psi, staying in normal form.

    R must be invertible with zero top-right block (n_h x (n_psi - n_h)) and
    invertible top-left block; then Hbar = R11 H and
    Gbar(u) = (R21 + R22 G(u)) R11^{-1}.
    """
    R = np.asarray(R, dtype=float)
    n_h, n_psi = basis.n_h, basis.n_psi
    if R.shape != (n_psi, n_psi):
        raise ValidationError(f"R must be {n_psi}x{n_psi}, got {R.shape}")
    r11 = R[:n_h, :n_h]
    r12 = R[:n_h, n_h:]
    r21 = R[n_h:, :n_h]
    r22 = R[n_h:, n_h:]
    if np.linalg.norm(r12) > R12_REL_TOL * np.linalg.norm(R):
        raise ValidationError(
            "R is not a normal-form change of basis: top-right block is nonzero "
            f"(||R12||_F = {np.linalg.norm(r12):.3e})"
        )
    if np.linalg.cond(r11) > 1e12 or np.linalg.cond(R) > 1e12:
        raise ValidationError("R or its top-left block is singular")
    r11_inv = np.linalg.inv(r11)
    h_new = RecombinedDictionary(r11, basis.h)
    g_new = TransformedInputFactor(r21, r22, r11_inv, basis.g)
    return NormalBasis(h_new, g_new)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def dictionary_from_spec(spec: dict) -> StateDictionary:
    kind = spec.get("kind")
    params = spec.get("params", {})
    if kind == "polynomial":
        return PolynomialDictionary(spec["n"], params["exponents"])
    if kind == "constant-augmented":
        return ConstantAugmentedDictionary(dictionary_from_spec(params["base"]))
    if kind == "neural":
        from .learning import neural_dictionary_from_spec

        return neural_dictionary_from_spec(spec)
    raise ValidationError(f"unknown dictionary kind {kind!r}")


def factor_from_spec(spec: dict) -> InputFactor:
    structure = spec.get("structure")
    if structure == "lifted-linear":
        return LiftedLinearFactor(spec["m"], spec["n_h"])
    if structure == "bilinear":
        return BilinearFactor(spec["m"], spec["n_h"])
    if structure == "neural":
        from .learning import neural_factor_from_spec

        return neural_factor_from_spec(spec)
    raise ValidationError(f"unknown input factor structure {structure!r}")


def basis_from_spec(spec: dict) -> NormalBasis:
    basis = NormalBasis(
        dictionary_from_spec(spec["params"]["state"]),
        factor_from_spec(spec["params"]["input"]),
    )
    for key, have in (("n_H", basis.n_h), ("n_Psi", basis.n_psi),
                      ("n", basis.n), ("m", basis.m)):
        if key in spec and spec[key] != have:
            raise ValidationError(f"basis spec {key}={spec[key]} but built {have}")
    return basis
