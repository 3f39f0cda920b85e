"""Kernel families with analytic first-argument derivatives.

Two families are supported:

* ``polynomial``: ``k(x, y) = (c + x.y)^d`` (isotropic inner-product kernel)
* ``gaussian``:   ``k(x, y) = exp(-|x - y|^2 / (2 s^2))``

Everything downstream (value function, gradient, Hessian, the SDP rows) is
linear in the expansion coefficients, so the only thing the rest of the
package needs from a kernel is the triple (values, gradients, Hessians) at a
point against a set of centers.  The batched helpers below return exactly
that.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InputError


class KernelFamily(str, Enum):
    POLYNOMIAL = "polynomial"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class KernelSpec:
    family: KernelFamily
    dim: int
    degree: int = 4
    offset: float = 1.0
    bandwidth: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        if int(self.dim) != self.dim or self.dim < 1:
            raise InputError(f"kernel dimension must be a positive integer, got {self.dim!r}")
        if self.family is KernelFamily.POLYNOMIAL:
            if int(self.degree) != self.degree or self.degree < 2:
                # the Hessian constraint at the origin needs a nonvanishing second derivative
                raise InputError(f"polynomial kernel degree must be an integer >= 2, got {self.degree!r}")
            if not self.offset > 0:
                raise InputError(f"polynomial kernel offset must be > 0, got {self.offset!r}")
            object.__setattr__(self, "degree", int(self.degree))
        else:
            if not self.bandwidth > 0:
                raise InputError(f"gaussian bandwidth must be > 0, got {self.bandwidth!r}")

    @classmethod
    def polynomial(cls, dim, degree=4, offset=1.0):
        return cls(KernelFamily.POLYNOMIAL, dim, degree=degree, offset=offset)

    @classmethod
    def gaussian(cls, dim, bandwidth=1.0):
        return cls(KernelFamily.GAUSSIAN, dim, bandwidth=bandwidth)

    def to_dict(self):
        if self.family is KernelFamily.POLYNOMIAL:
            return {"family": self.family.value, "degree": self.degree, "offset": float(self.offset)}
        return {"family": self.family.value, "bandwidth": float(self.bandwidth)}

    @classmethod
    def from_dict(cls, data, dim):
        data = dict(data)
        family = data.pop("family")
        unknown = set(data) - {"degree", "offset", "bandwidth"}
        if unknown:
            raise InputError(f"unknown kernel fields: {sorted(unknown)}")
        try:
            return cls(family, dim, **data)
        except ValueError as exc:
            raise InputError(str(exc)) from exc


def _ipow(base, k):
    """``base**k`` for a nonnegative integer ``k`` by repeated multiplication.

    Keeps negative bases exact and avoids any real-power routine.
    """
    out = np.ones_like(base)
    for _ in range(k):
        out = out * base
    return out


def _as_points(x, dim, name="x"):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape[-1] != dim:
        raise InputError(f"{name} has dimension {arr.shape[-1]}, kernel expects {dim}")
    return arr


def _mirror_upper(H):
    """Rebuild a stack of matrices from their upper triangles so they are bitwise symmetric."""
    upper = np.triu(H)
    return upper + np.swapaxes(np.triu(H, 1), -1, -2)


def kernel_values(spec, X, Y):
    """Kernel matrix ``K[a, i] = k(X[a], Y[i])`` for ``X (N, n)``, ``Y (M, n)``."""
    X = np.atleast_2d(_as_points(X, spec.dim))
    Y = np.atleast_2d(_as_points(Y, spec.dim, "y"))
    if spec.family is KernelFamily.POLYNOMIAL:
        s = spec.offset + np.einsum("ak,ik->ai", X, Y)
        return _ipow(s, spec.degree)
    r = X[:, None, :] - Y[None, :, :]
    return np.exp(-np.einsum("aik,aik->ai", r, r) / (2.0 * spec.bandwidth**2))


def kernel_gradients(spec, X, Y):
    """Gradients w.r.t. the first argument, shape ``(N, M, n)``."""
    X = np.atleast_2d(_as_points(X, spec.dim))
    Y = np.atleast_2d(_as_points(Y, spec.dim, "y"))
    if spec.family is KernelFamily.POLYNOMIAL:
        d = spec.degree
        s = spec.offset + np.einsum("ak,ik->ai", X, Y)
        coef = d * _ipow(s, d - 1)
        return coef[:, :, None] * Y[None, :, :]
    sig2 = spec.bandwidth**2
    r = X[:, None, :] - Y[None, :, :]
    k = np.exp(-np.einsum("aik,aik->ai", r, r) / (2.0 * sig2))
    return -(r / sig2) * k[:, :, None]


def kernel_hessians(spec, X, Y):
    """Hessians w.r.t. the first argument, shape ``(N, M, n, n)``, bitwise symmetric."""
    X = np.atleast_2d(_as_points(X, spec.dim))
    Y = np.atleast_2d(_as_points(Y, spec.dim, "y"))
    n = spec.dim
    if spec.family is KernelFamily.POLYNOMIAL:
        d = spec.degree
        s = spec.offset + np.einsum("ak,ik->ai", X, Y)
        coef = d * (d - 1) * _ipow(s, d - 2)
        yy = Y[:, :, None] * Y[:, None, :]
        H = coef[:, :, None, None] * yy[None]
    else:
        sig2 = spec.bandwidth**2
        r = X[:, None, :] - Y[None, :, :]
        k = np.exp(-np.einsum("aik,aik->ai", r, r) / (2.0 * sig2))
        rr = r[..., :, None] * r[..., None, :] / sig2**2
        H = (rr - np.eye(n) / sig2) * k[:, :, None, None]
    return _mirror_upper(H)


def evaluate(spec, x, y):
    """Scalar kernel value ``k(x, y)``."""
    x = _as_points(x, spec.dim)
    y = _as_points(y, spec.dim, "y")
    if x.ndim != 1 or y.ndim != 1:
        raise InputError("evaluate expects single points; use kernel_values for batches")
    if spec.family is KernelFamily.POLYNOMIAL:
        return float(_ipow(np.float64(spec.offset + float(np.dot(x, y))), spec.degree))
    r = x - y
    return float(math.exp(-float(np.dot(r, r)) / (2.0 * spec.bandwidth**2)))


def grad_x(spec, x, y):
    return kernel_gradients(spec, x, y)[0, 0]


def hess_x(spec, x, y):
    return kernel_hessians(spec, x, y)[0, 0]


def feature_rows(spec, centers, x):
    """Per-point feature data at ``x`` against every center.

    Returns ``(k_row, G_x, H_stack)`` with ``k_row`` of shape ``(M,)``,
    ``G_x`` of shape ``(n, M)`` whose column ``i`` is the gradient of
    ``k(., x_i)`` at ``x``, and ``H_stack`` of shape ``(M, n, n)``.
    """
    C = centers.points if isinstance(centers, CenterSet) else np.atleast_2d(np.asarray(centers, float))
    if len(C) == 0:
        raise InputError("center set is empty")
    x = _as_points(x, spec.dim)
    if x.ndim != 1:
        raise InputError("feature_rows expects a single point")
    k_row = kernel_values(spec, x, C)[0]
    G_x = kernel_gradients(spec, x, C)[0].T
    H_stack = kernel_hessians(spec, x, C)[0]
    return k_row, G_x, H_stack


def equality_row_count(n):
    return 1 + n + n * (n + 1) // 2


@dataclass(frozen=True)
class CenterSet:
    """Kernel expansion nodes.  ``descriptor`` records how they were generated."""

    points: np.ndarray
    descriptor: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pts = np.atleast_2d(np.array(self.points, dtype=float))
        if pts.size == 0:
            raise InputError("center set is empty")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def count(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return self.count

    @classmethod
    def uniform_grid(cls, bounds, counts):
        """Tensor grid with endpoints included on every axis (linspace semantics)."""
        bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
        counts = [int(c) for c in np.atleast_1d(counts)]
        if len(counts) == 1 and len(bounds) > 1:
            counts = counts * len(bounds)
        if len(counts) != len(bounds):
            raise InputError("grid bounds and counts disagree in dimension")
        if any(c < 1 for c in counts):
            raise InputError("grid counts must be positive")
        axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(bounds, counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        desc = {"type": "grid", "bounds": bounds.tolist(), "counts": counts}
        return cls(pts, desc)

    @classmethod
    def from_points(cls, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return cls(pts, {"type": "list", "points": pts.tolist()})

    def min_separation(self):
        if self.count < 2:
            return math.inf
        diff = self.points[:, None, :] - self.points[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        dist[np.diag_indices(self.count)] = np.inf
        return float(dist.min())

    def validate(self, domain, check_count=True):
        """Check the invariants against an ``(n, 2)`` domain box."""
        domain = np.asarray(domain, dtype=float)
        if domain.shape[0] != self.dim:
            raise InputError(f"centers have dimension {self.dim}, domain has {domain.shape[0]}")
        tol = 1e-12 * (1.0 + np.abs(domain).max())
        inside = (self.points >= domain[:, 0] - tol) & (self.points <= domain[:, 1] + tol)
        if not inside.all():
            bad = np.where(~inside.all(axis=1))[0]
            raise InputError(f"{len(bad)} point(s) outside the domain box, first at index {bad[0]}")
        if self.min_separation() <= 0:
            raise InputError("points are not pairwise distinct")
        if check_count and self.count < equality_row_count(self.dim):
            warnings.warn(
                f"only {self.count} centers for {equality_row_count(self.dim)} equality rows; "
                "the program is likely infeasible",
                stacklevel=2,
            )


def interior_fill_distance(bounds, counts):
    """Fill distance of a uniform tensor grid measured over interior cells.

    Half the diagonal of one grid cell; boundary cells are not treated
    specially.
    """
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    counts = np.broadcast_to(np.atleast_1d(counts), (len(bounds),))
    spacing = (bounds[:, 1] - bounds[:, 0]) / np.maximum(counts - 1, 1)
    return 0.5 * float(np.sqrt(np.sum(spacing**2)))
