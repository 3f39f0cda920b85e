"""Control-affine systems ``xdot = f(x) + g(x) u`` with running cost ``q(x) + u'Du/2``.

Model callables take states with shape ``(..., n)`` and broadcast over the
leading axes (set ``vectorized=False`` for plain per-point callables and the
model loops for you).  Shapes returned: ``f -> (..., n)``,
``g -> (..., n, m)``, ``q -> (...)``.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InputError, NumericalError

JACOBIAN_STEP = 1e-6
HESSIAN_STEP = 1e-4


@dataclass(frozen=True)
class SystemModel:
    name: str
    n: int
    m: int
    f: Callable
    g: Callable
    q: Callable
    D: np.ndarray
    domain: np.ndarray
    jacobian: Optional[Callable] = None
    cost_hessian: Optional[Callable] = None
    value: Optional[Callable] = None
    value_grad: Optional[Callable] = None
    control: Optional[Callable] = None
    vectorized: bool = True
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        dom = np.asarray(self.domain, dtype=float).reshape(-1, 2)
        if D.shape != (self.m, self.m):
            raise InputError(f"D must be {self.m}x{self.m}, got {D.shape}")
        if dom.shape[0] != self.n:
            raise InputError(f"domain must have {self.n} rows, got {dom.shape[0]}")
        if np.any(dom[:, 0] >= dom[:, 1]):
            raise InputError("domain box has an empty side")
        if not np.allclose(D, D.T, atol=1e-12) or np.linalg.eigvalsh(0.5 * (D + D.T)).min() <= 0:
            raise InputError("D must be symmetric positive definite")
        D.setflags(write=False)
        dom.setflags(write=False)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "domain", dom)

    # batched evaluation -------------------------------------------------

    def _apply(self, fn, X, tail):
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n:
            raise InputError(f"state has dimension {X.shape[-1]}, model expects {self.n}")
        if self.vectorized:
            return np.asarray(fn(X), dtype=float).reshape(X.shape[:-1] + tail)
        flat = X.reshape(-1, self.n)
        out = np.array([np.asarray(fn(x), dtype=float).reshape(tail) for x in flat])
        return out.reshape(X.shape[:-1] + tail)

    def drift(self, X):
        return self._apply(self.f, X, (self.n,))

    def input_map(self, X):
        return self._apply(self.g, X, (self.n, self.m))

    def cost(self, X):
        return self._apply(self.q, X, ())

    @property
    def has_exact(self):
        return self.value is not None and self.value_grad is not None

    def exact_value(self, X):
        return self._apply(self.value, X, ())

    def exact_gradient(self, X):
        return self._apply(self.value_grad, X, (self.n,))

    def exact_control(self, X):
        if self.control is not None:
            return self._apply(self.control, X, (self.m,))
        return feedback_from_gradient(self, X, self.exact_gradient(X))

    def closed_loop(self, X, U):
        G = self.input_map(X)
        return self.drift(X) + np.einsum("...ij,...j->...i", G, U)


@dataclass(frozen=True)
class Linearization:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray


def feedback_from_gradient(model, X, dV):
    """``u = -D^{-1} g(x)' dV`` for batched states and gradients."""
    G = model.input_map(X)
    gtv = np.einsum("...ij,...i->...j", G, dV)
    return -np.linalg.solve(model.D, gtv[..., None])[..., 0]


def hjb_expression(model, X, dV):
    """``dV'f - dV'g D^{-1} g'dV / 2 + q`` evaluated pointwise."""
    X = np.asarray(X, dtype=float)
    G = model.input_map(X)
    gtv = np.einsum("...ij,...i->...j", G, dV)
    Dinv_gtv = np.linalg.solve(model.D, gtv[..., None])[..., 0]
    return (
        np.einsum("...i,...i->...", dV, model.drift(X))
        - 0.5 * np.einsum("...j,...j->...", gtv, Dinv_gtv)
        + model.cost(X)
    )


def exact_hjb_residual(model, X):
    if not model.has_exact:
        raise InputError(f"model {model.name!r} carries no exact solution")
    X = np.asarray(X, dtype=float)
    return hjb_expression(model, X, model.exact_gradient(X))


# linearization --------------------------------------------------------


def _fd_jacobian(model, h=JACOBIAN_STEP):
    n = model.n
    A = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        A[:, k] = (model.drift(e) - model.drift(-e)) / (2 * h)
    return A


def _fd_hessian_once(fun, n, h):
    H = np.empty((n, n))
    f0 = fun(np.zeros(n))
    eye = np.eye(n) * h
    for i in range(n):
        H[i, i] = (fun(eye[i]) - 2 * f0 + fun(-eye[i])) / h**2
        for j in range(n):
            if j == i:
                continue
            H[i, j] = (
                fun(eye[i] + eye[j]) - fun(eye[i] - eye[j]) - fun(-eye[i] + eye[j]) + fun(-eye[i] - eye[j])
            ) / (4 * h**2)
    return H


def _fd_hessian(model, h=HESSIAN_STEP):
    fun = lambda x: float(model.cost(x))  # noqa: E731
    coarse = _fd_hessian_once(fun, model.n, h)
    fine = _fd_hessian_once(fun, model.n, h / 2)
    return (4 * fine - coarse) / 3


def linearize(model, analytic=True):
    """Jacobian of ``f``, ``g(0)`` and Hessian of ``q`` at the origin.

    Uses the model's analytic derivatives when present and ``analytic`` is
    set; otherwise central differences (Richardson-refined for the Hessian).
    """
    origin = np.zeros(model.n)
    if analytic and model.jacobian is not None:
        A = np.asarray(model.jacobian(origin), dtype=float).reshape(model.n, model.n)
    else:
        A = _fd_jacobian(model)
    B = model.input_map(origin).copy()
    if analytic and model.cost_hessian is not None:
        Q = np.asarray(model.cost_hessian(origin), dtype=float).reshape(model.n, model.n)
    else:
        Q = _fd_hessian(model)
    asym = np.abs(Q - Q.T).max()
    if asym > 1e-6 * max(1.0, np.abs(Q).max()):
        raise NumericalError(f"state-cost Hessian is not symmetric (asymmetry {asym:.2e})")
    Q = 0.5 * (Q + Q.T)
    if np.linalg.eigvalsh(Q).min() < -1e-8:
        warnings.warn("state-cost Hessian at the origin is not positive semidefinite", stacklevel=2)
    return Linearization(A=A, B=B, Q=Q)


def check_model(model, samples=100, rng=None):
    """Sample-check the standing assumptions.

    Raises :class:`InputError` when the origin is not an equilibrium or the
    cost does not vanish there.  Returns a list of soft findings (e.g. points
    where ``q <= 0``); these are not errors because positivity is only
    sampled, never proven.
    """
    rng = np.random.default_rng(rng)
    origin = np.zeros(model.n)
    if np.linalg.norm(model.drift(origin)) >= 1e-12:
        raise InputError("origin is not an equilibrium: |f(0)| >= 1e-12")
    if abs(float(model.cost(origin))) >= 1e-12:
        raise InputError("state cost does not vanish at the origin")
    lo, hi = model.domain[:, 0], model.domain[:, 1]
    X = rng.uniform(lo, hi, size=(samples, model.n))
    X = X[np.linalg.norm(X, axis=1) > 0]
    qv = model.cost(X)
    issues = []
    bad = int(np.sum(qv <= 0))
    if bad:
        issues.append(f"state cost is not positive at {bad} of {len(X)} sampled points (min {qv.min():.3g})")
    return issues


# built-in systems -----------------------------------------------------


def _quadratic_form(Q):
    Q = np.asarray(Q, dtype=float)
    return lambda X: 0.5 * np.einsum("...i,ij,...j->...", X, Q, X)


def quadratic_cost(model, Q):
    """Same dynamics with ``q(x) = x'Qx / 2`` so that the Hessian of ``q`` at 0 is ``Q``.

    Any exact solution carried by ``model`` is kept as a reference for
    comparisons; it is generally not optimal for the new cost.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape != (model.n, model.n):
        raise InputError(f"Q must be {model.n}x{model.n}, got {Q.shape}")
    if not np.allclose(Q, Q.T):
        raise InputError("Q must be symmetric")
    return dataclasses.replace(
        model,
        q=_quadratic_form(Q),
        cost_hessian=lambda x, Q=Q: Q,
        params={**model.params, "Q": Q.tolist()},
    )


def with_control_weight(model, D):
    D = np.atleast_2d(np.asarray(D, dtype=float))
    return dataclasses.replace(model, D=D, params={**model.params, "D": D.tolist()})


def builtin_1d():
    """Scalar ``xdot = x + x^3 + u`` with exact solution ``V* = x^2 + x^4/4``.

    The state cost is built as ``q = (V*')^2/2 - V*' f`` so that ``V*``
    solves the HJB equation identically (note it is ``-x^4 - x^6/2 <= 0``).
    """

    def f(X):
        return X + X**3

    def g(X):
        return np.ones(X.shape[:-1] + (1, 1))

    def value(X):
        x = X[..., 0]
        return x**2 + 0.25 * x**4

    def value_grad(X):
        return 2 * X + X**3

    def q(X):
        dv = value_grad(X)[..., 0]
        return 0.5 * dv**2 - dv * f(X)[..., 0]

    return SystemModel(
        name="poly1d",
        n=1,
        m=1,
        f=f,
        g=g,
        q=q,
        D=np.eye(1),
        domain=[[-1.5, 1.5]],
        jacobian=lambda x: np.array([[1.0 + 3.0 * float(x[0]) ** 2]]),
        cost_hessian=lambda x: np.array([[-12.0 * float(x[0]) ** 2 - 15.0 * float(x[0]) ** 4]]),
        value=value,
        value_grad=value_grad,
        control=lambda X: -value_grad(X),
    )


def builtin_2d():
    """``xdot = x(1 + |x|^2) + u`` on the plane with ``V* = |x|^2 + |x|^4/4``."""

    def sq(X):
        return np.einsum("...i,...i->...", X, X)

    def f(X):
        return X * (1.0 + sq(X))[..., None]

    def g(X):
        return np.broadcast_to(np.eye(2), X.shape[:-1] + (2, 2)).copy()

    def value(X):
        s = sq(X)
        return s + 0.25 * s**2

    def value_grad(X):
        return X * (2.0 + sq(X))[..., None]

    def control(X):
        return -2.0 * X * (1.0 + 0.5 * sq(X))[..., None]

    def q(X):
        dv = value_grad(X)
        return 0.5 * sq(dv) - np.einsum("...i,...i->...", dv, f(X))

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        return (1.0 + x @ x) * np.eye(2) + 2.0 * np.outer(x, x)

    def cost_hessian(x):
        x = np.asarray(x, dtype=float)
        s = x @ x
        return -(4 * s + 3 * s**2) * np.eye(2) - (8 + 12 * s) * np.outer(x, x)

    return SystemModel(
        name="radial2d",
        n=2,
        m=2,
        f=f,
        g=g,
        q=q,
        D=np.eye(2),
        domain=[[-1.5, 1.5], [-1.5, 1.5]],
        jacobian=jacobian,
        cost_hessian=cost_hessian,
        value=value,
        value_grad=value_grad,
        control=control,
    )


def builtin_vdp(mu=1.0, Q=None, R=None):
    """Forced Van der Pol oscillator, ``q = x'Qx/2`` and ``D = R`` (defaults ``2I`` and ``1``)."""
    if not mu > 0:
        raise InputError(f"Van der Pol parameter must be > 0, got {mu!r}")
    Q = 2.0 * np.eye(2) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(1) if R is None else np.atleast_2d(np.asarray(R, dtype=float))

    def f(X):
        x1, x2 = X[..., 0], X[..., 1]
        return np.stack([x2, -x1 + mu * (1.0 - x1**2) * x2], axis=-1)

    def g(X):
        out = np.zeros(X.shape[:-1] + (2, 1))
        out[..., 1, 0] = 1.0
        return out

    def jacobian(x):
        x1, x2 = float(x[0]), float(x[1])
        return np.array([[0.0, 1.0], [-1.0 - 2.0 * mu * x1 * x2, mu * (1.0 - x1**2)]])

    return SystemModel(
        name="vanderpol",
        n=2,
        m=1,
        f=f,
        g=g,
        q=_quadratic_form(Q),
        D=R,
        domain=[[-2.0, 2.0], [-2.0, 2.0]],
        jacobian=jacobian,
        cost_hessian=lambda x: Q,
        params={"mu": mu, "Q": Q.tolist(), "R": R.tolist()},
    )


def builtin_linear(A, Q, B=None, domain=None, name="linear"):
    """Linear system ``xdot = Ax + Bu`` with ``q = x'Qx/2``.

    With ``B`` omitted the input map is identically zero (one dummy input),
    which is the uncontrolled Lyapunov setting.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.zeros((n, 1)) if B is None else np.asarray(B, dtype=float).reshape(n, -1)
    m = B.shape[1]
    domain = [[-1.0, 1.0]] * n if domain is None else domain

    def f(X):
        return np.einsum("ij,...j->...i", A, X)

    def g(X):
        return np.broadcast_to(B, X.shape[:-1] + (n, m)).copy()

    return SystemModel(
        name=name,
        n=n,
        m=m,
        f=f,
        g=g,
        q=_quadratic_form(Q),
        D=np.eye(m),
        domain=domain,
        jacobian=lambda x: A,
        cost_hessian=lambda x: np.asarray(Q, dtype=float),
        params={"A": A.tolist(), "B": B.tolist(), "Q": np.asarray(Q, dtype=float).tolist()},
    )


BUILTINS = {"poly1d": builtin_1d, "radial2d": builtin_2d, "vanderpol": builtin_vdp}


def builtin(name, **params):
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise InputError(f"unknown system {name!r}; choose one of {sorted(BUILTINS)}") from None
    return factory(**params)
