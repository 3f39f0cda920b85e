"""Kernel-collocation SDP for value-function synthesis.

Decision variable: kernel coefficients ``p`` (``V = sum_i p_i k(., x_i)``).

    minimize    |p|^2
    subject to  V(0) = 0,  grad V(0) = 0,  hess V(0) = P   (or |hess V(0) - P|_ij <= eps)
                M_j(p) >= 0 (PSD) at every collocation point x_j

with the per-point block

    M_j(p) = [[2 (p' a_j + q(x_j)),  p' B_j],
              [B_j' p,               D     ]]

where ``a_j[i] = grad k(x_j, x_i)' f(x_j)`` and ``B_j[i] = grad k(x_j, x_i)' g(x_j)``.
By the Schur complement ``M_j >= 0`` is exactly the HJB inequality at ``x_j``.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import kernel as kern
from .errors import InputError, SynthesisError
from .kernel import CenterSet, KernelSpec
from .riccati import RiccatiSolution, solve_are
from .system import SystemModel, feedback_from_gradient, linearize

log = logging.getLogger(__name__)

BACKENDS = ("clarabel", "scs")


@dataclass(frozen=True)
class CollocationGrid:
    points: np.ndarray
    descriptor: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pts = np.atleast_2d(np.array(self.points, dtype=float))
        if pts.shape[0] < 1:
            raise InputError("collocation grid is empty")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def same_as_centers(cls, centers):
        return cls(centers.points, {"type": "centers"})

    @classmethod
    def uniform_grid(cls, bounds, counts):
        cs = CenterSet.uniform_grid(bounds, counts)
        return cls(cs.points, cs.descriptor)

    @classmethod
    def from_points(cls, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return cls(pts, {"type": "list", "points": pts.tolist()})


@dataclass(frozen=True)
class SolverSettings:
    backend: str = "clarabel"
    tolerance: float = 1e-4
    max_iterations: int = 50000
    polish: bool = True
    precondition: bool = False
    verbose: bool = False

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise InputError(f"unknown backend {self.backend!r}; choose one of {BACKENDS}")
        if not 0 < self.tolerance < 1:
            raise InputError("solver tolerance must lie in (0, 1)")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be positive")


@dataclass(frozen=True, eq=False)
class SynthesisProblem:
    model: SystemModel
    kernel: KernelSpec
    centers: CenterSet
    grid: CollocationGrid
    P_target: Optional[np.ndarray]
    hessian_relaxation: float
    drift_features: np.ndarray  # (N, M): a_j
    input_features: np.ndarray  # (N, M, m): B_j
    cost_values: np.ndarray  # (N,): q(x_j)
    origin_values: np.ndarray  # (M,)
    origin_gradients: np.ndarray  # (n, M)
    origin_hessians: np.ndarray  # (M, n, n)

    @property
    def n(self):
        return self.model.n

    @property
    def m(self):
        return self.model.m

    @property
    def n_centers(self):
        return self.centers.count

    @property
    def n_blocks(self):
        return len(self.grid)

    @property
    def block_size(self):
        return 1 + self.m

    @property
    def hessian_constrained(self):
        return self.P_target is not None

    def hessian_rows(self):
        """Upper-triangle Hessian rows and their targets."""
        iu = np.triu_indices(self.n)
        rows = self.origin_hessians[:, iu[0], iu[1]].T
        target = self.P_target[iu] if self.P_target is not None else np.zeros(len(iu[0]))
        return rows, target

    def equality_rows(self):
        rows = [self.origin_values[None, :], self.origin_gradients]
        rhs = [np.zeros(1), np.zeros(self.n)]
        if self.hessian_constrained and self.hessian_relaxation == 0:
            H, P = self.hessian_rows()
            rows.append(H)
            rhs.append(P)
        return np.vstack(rows), np.concatenate(rhs)

    def inequality_rows(self):
        """Two-sided rows ``lo <= G p <= hi`` (only with a relaxed Hessian constraint)."""
        if not self.hessian_constrained or self.hessian_relaxation == 0:
            return np.zeros((0, self.n_centers)), np.zeros(0), np.zeros(0)
        H, P = self.hessian_rows()
        eps = self.hessian_relaxation
        return H, P - eps, P + eps


def assemble(model, kernel, centers, grid=None, P_target=None, hessian_relaxation=0.0,
             hessian_constraint=True):
    """Precompute all per-point data of the collocation program.

    ``P_target`` is required unless ``hessian_constraint`` is False (used to
    demonstrate that the unconstrained program admits the trivial solution).
    """
    if kernel.dim != model.n:
        raise InputError(f"kernel dimension {kernel.dim} does not match state dimension {model.n}")
    if not isinstance(centers, CenterSet):
        centers = CenterSet.from_points(centers)
    grid = CollocationGrid.same_as_centers(centers) if grid is None else grid
    if centers.dim != model.n or grid.points.shape[1] != model.n:
        raise InputError("centers/collocation points do not match the state dimension")
    centers.validate(model.domain, check_count=False)
    CenterSet(grid.points).validate(model.domain, check_count=False)
    if hessian_relaxation < 0:
        raise InputError("hessian_relaxation must be >= 0")

    if hessian_constraint:
        if P_target is None:
            raise InputError("P_target is required when the Hessian constraint is active")
        P_target = np.atleast_2d(np.asarray(P_target, dtype=float))
        if P_target.shape != (model.n, model.n):
            raise InputError(f"P_target must be {model.n}x{model.n}")
        P_target = 0.5 * (P_target + P_target.T)
        P_target.setflags(write=False)
    else:
        P_target = None

    n_rows = kern.equality_row_count(model.n)
    if centers.count < n_rows:
        warnings.warn(f"{centers.count} centers for {n_rows} equality rows: program is likely infeasible",
                      stacklevel=2)

    X = grid.points
    C = centers.points
    grads = kern.kernel_gradients(kernel, X, C)  # (N, M, n)
    drift_features = np.einsum("jik,jk->ji", grads, model.drift(X))
    input_features = np.einsum("jik,jkl->jil", grads, model.input_map(X))
    cost_values = model.cost(X)

    origin = np.zeros((1, model.n))
    k0 = kern.kernel_values(kernel, origin, C)[0]
    G0 = kern.kernel_gradients(kernel, origin, C)[0].T
    H0 = kern.kernel_hessians(kernel, origin, C)[0]

    arrays = [drift_features, input_features, cost_values, k0, G0, H0]
    for a in arrays:
        a.setflags(write=False)
    return SynthesisProblem(model, kernel, centers, grid, P_target, float(hessian_relaxation), *arrays)


def lmi_block(problem, j, p):
    """The block ``M_j(p)`` at collocation point ``j`` (0-based)."""
    p = np.asarray(p, dtype=float)
    m = problem.m
    a = problem.drift_features[j]
    B = problem.input_features[j]
    out = np.empty((1 + m, 1 + m))
    out[0, 0] = 2.0 * (p @ a + problem.cost_values[j])
    out[0, 1:] = p @ B
    out[1:, 0] = out[0, 1:]
    out[1:, 1:] = problem.model.D
    return out


@dataclass(frozen=True, eq=False)
class ConicProgram:
    """Solver-independent form of the program.

    Blocks are affine maps ``p -> block_const[j] + sum_i p_i block_coef[j, i]``
    with symmetric coefficient matrices.  The objective ``|p|^2`` is carried
    in epigraph form: minimize ``t`` subject to ``|p| <= t`` (same minimizer).
    """

    n_vars: int
    eq_A: np.ndarray
    eq_b: np.ndarray
    ineq_G: np.ndarray
    ineq_lo: np.ndarray
    ineq_hi: np.ndarray
    block_const: np.ndarray  # (N, s, s)
    block_coef: np.ndarray  # (N, M, s, s)
    block_scale: np.ndarray  # (N,) congruence scaling of the first row/column
    dropped_rows: tuple = ()
    objective: str = "epigraph_norm"

    @property
    def variable_map(self):
        return {"p": [0, self.n_vars], "t": self.n_vars}

    @property
    def n_blocks(self):
        return self.block_const.shape[0]

    def block(self, j, p):
        return self.block_const[j] + np.einsum("i,iab->ab", np.asarray(p, dtype=float), self.block_coef[j])

    def blocks(self, p):
        return self.block_const + np.einsum("i,jiab->jab", np.asarray(p, dtype=float), self.block_coef)

    def to_json_dict(self):
        s = self.block_const.shape[1]
        iu = np.triu_indices(s)
        return {
            "n_vars": self.n_vars,
            "objective": self.objective,
            "variable_map": self.variable_map,
            "equality": {"A": self.eq_A.tolist(), "b": self.eq_b.tolist(), "dropped_rows": list(self.dropped_rows)},
            "inequality": {"G": self.ineq_G.tolist(), "lo": self.ineq_lo.tolist(), "hi": self.ineq_hi.tolist()},
            "psd_blocks": [
                {
                    "size": s,
                    "packing": "upper_row_major",
                    "const": self.block_const[j][iu].tolist(),
                    "coef": self.block_coef[j][:, iu[0], iu[1]].tolist(),
                }
                for j in range(self.n_blocks)
            ],
        }


def _independent_rows(A, rtol=1e-10):
    if A.shape[0] == 0:
        return np.arange(0)
    _, R, piv = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rtol * diag.max())) if diag.size and diag.max() > 0 else 0
    return np.sort(piv[:rank])


def to_conic(problem, precondition=False):
    A, b = problem.equality_rows()
    keep = _independent_rows(A)
    dropped = tuple(int(i) for i in sorted(set(range(A.shape[0])) - set(keep.tolist())))
    if dropped:
        warnings.warn(f"dropping linearly dependent equality rows {list(dropped)}", stacklevel=2)
        A, b = A[keep], b[keep]
    G, lo, hi = problem.inequality_rows()

    N, M, m = problem.n_blocks, problem.n_centers, problem.m
    s = 1 + m
    const = np.zeros((N, s, s))
    const[:, 0, 0] = 2.0 * problem.cost_values
    const[:, 1:, 1:] = problem.model.D
    coef = np.zeros((N, M, s, s))
    coef[:, :, 0, 0] = 2.0 * problem.drift_features
    coef[:, :, 0, 1:] = problem.input_features
    coef[:, :, 1:, 0] = problem.input_features
    scale = np.ones(N)
    if precondition:
        scale = 1.0 / np.maximum(1.0, np.abs(2.0 * problem.cost_values))
        # congruence diag(sqrt(s), I) keeps the PSD set unchanged
        r = np.sqrt(scale)
        const[:, 0, 0] *= scale
        const[:, 0, 1:] *= r[:, None]
        const[:, 1:, 0] *= r[:, None]
        coef[:, :, 0, 0] *= scale[:, None]
        coef[:, :, 0, 1:] *= r[:, None, None]
        coef[:, :, 1:, 0] *= r[:, None, None]
    return ConicProgram(M, A, b, G, lo, hi, const, coef, scale, dropped)


def _backend_options(settings):
    tol = settings.tolerance
    if settings.backend == "clarabel":
        return "CLARABEL", {"tol_gap_abs": tol, "tol_gap_rel": tol, "tol_feas": tol,
                            "max_iter": settings.max_iterations}
    return "SCS", {"eps_abs": tol, "eps_rel": tol, "max_iters": settings.max_iterations}


def residuals(program, p):
    """Primal residuals of ``p``: equality norm, inequality excess, min block eigenvalue."""
    eq = float(np.linalg.norm(program.eq_A @ p - program.eq_b)) if program.eq_A.size else 0.0
    if program.ineq_G.size:
        v = program.ineq_G @ p
        ineq = float(max(0.0, np.max(program.ineq_lo - v), np.max(v - program.ineq_hi)))
    else:
        ineq = 0.0
    min_eig = float(np.linalg.eigvalsh(program.blocks(p)).min()) if program.n_blocks else np.inf
    return {"equality": eq, "inequality": ineq, "min_block_eig": min_eig}


def _infeasibility_report(program, limit=5):
    A, b = program.eq_A, program.eq_b
    p0 = np.linalg.lstsq(A, b, rcond=None)[0] if A.size else np.zeros(program.n_vars)
    eigs = np.linalg.eigvalsh(program.blocks(p0)).min(axis=1) if program.n_blocks else np.zeros(0)
    worst = np.argsort(eigs)[:limit]
    return {
        "probe": "minimum-norm solution of the equality rows",
        "violated_blocks": [{"block": int(j), "min_eig": float(eigs[j])} for j in worst if eigs[j] < 0],
    }


def _backend_dual_residual(prob):
    # only SCS exposes its residuals through cvxpy
    extra = prob.solver_stats.extra_stats
    if isinstance(extra, dict) and "info" in extra:
        value = extra["info"].get("res_dual")
        return None if value is None else float(value)
    return None


def solve(program, settings=None):
    """Solve a :class:`ConicProgram`; returns ``(p, stats)``."""
    import cvxpy as cp

    settings = settings or SolverSettings()
    M = program.n_vars
    p = cp.Variable(M)
    t = cp.Variable()
    cons = [cp.SOC(t, p)]
    if program.eq_A.size:
        cons.append(program.eq_A @ p == program.eq_b)
    if program.ineq_G.size:
        cons += [program.ineq_G @ p >= program.ineq_lo, program.ineq_G @ p <= program.ineq_hi]
    N = program.n_blocks
    if N:
        s = program.block_const.shape[1]
        flat = program.block_coef.reshape(N, M, s * s).transpose(0, 2, 1).reshape(N * s * s, M)
        stacked = flat @ p + program.block_const.reshape(-1)
        for j in range(N):
            E = cp.reshape(stacked[j * s * s:(j + 1) * s * s], (s, s), order="C")
            cons.append(0.5 * (E + E.T) >> 0)
    prob = cp.Problem(cp.Minimize(t), cons)

    solver, opts = _backend_options(settings)
    start = time.perf_counter()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            prob.solve(solver=solver, verbose=settings.verbose, **opts)
    except cp.error.SolverError as exc:
        raise SynthesisError(f"backend {settings.backend} failed: {exc}") from exc
    wall = time.perf_counter() - start
    status = prob.status
    stats = {
        "backend": settings.backend,
        "status": status,
        "iterations": getattr(prob.solver_stats, "num_iters", None),
        "solve_time": wall,
        "tolerance": settings.tolerance,
    }
    if status in ("infeasible", "infeasible_inaccurate"):
        raise SynthesisError("program is infeasible", {"stats": stats, **_infeasibility_report(program)})
    if p.value is None or status not in ("optimal", "optimal_inaccurate"):
        raise SynthesisError(f"backend did not converge (status {status})", {"stats": stats})

    pv = np.asarray(p.value, dtype=float).copy()
    raw = residuals(program, pv)
    if settings.polish and program.eq_A.size:
        pv = pv - np.linalg.lstsq(program.eq_A, program.eq_A @ pv - program.eq_b, rcond=None)[0]
    res = residuals(program, pv)
    stats.update(
        objective=float(pv @ pv),
        raw_residuals=raw,
        residuals=res,
        primal_residual=max(res["equality"], res["inequality"], max(0.0, -res["min_block_eig"])),
        dual_residual=_backend_dual_residual(prob),
    )
    if status == "optimal_inaccurate":
        ok = res["equality"] <= 100 * settings.tolerance and res["min_block_eig"] >= -10 * settings.tolerance
        if not ok:
            raise SynthesisError("backend returned an inaccurate point that fails the residual check",
                                 {"stats": stats})
        log.warning("backend reported optimal_inaccurate; residual check passed")
    return pv, stats


@dataclass(frozen=True, eq=False)
class ValueFunction:
    """``V(x) = sum_i p_i k(x, x_i)`` bound to a model (for ``g`` and ``D``)."""

    p: np.ndarray
    kernel: KernelSpec
    centers: CenterSet
    model: SystemModel

    def __post_init__(self):
        p = np.array(self.p, dtype=float).reshape(-1)
        if p.shape[0] != self.centers.count:
            raise InputError(f"{p.shape[0]} coefficients for {self.centers.count} centers")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)
        if self.kernel.dim != self.model.n:
            raise InputError("value function and model dimensions disagree")

    @property
    def D(self):
        return self.model.D

    def _flat(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.model.n:
            raise InputError(f"state has dimension {X.shape[-1]}, expected {self.model.n}")
        return X.reshape(-1, self.model.n), X.shape[:-1]

    def value(self, X):
        F, lead = self._flat(X)
        return (kern.kernel_values(self.kernel, F, self.centers.points) @ self.p).reshape(lead)

    def gradient(self, X):
        F, lead = self._flat(X)
        G = kern.kernel_gradients(self.kernel, F, self.centers.points)
        return np.einsum("aik,i->ak", G, self.p).reshape(lead + (self.model.n,))

    def hessian(self, X):
        F, lead = self._flat(X)
        H = kern.kernel_hessians(self.kernel, F, self.centers.points)
        return np.einsum("aikl,i->akl", H, self.p).reshape(lead + (self.model.n, self.model.n))

    def control(self, X):
        X = np.asarray(X, dtype=float)
        return feedback_from_gradient(self.model, X, self.gradient(X))

    __call__ = value

    def to_dict(self):
        return {
            "system": self.model.name,
            "system_params": self.model.params,
            "kernel": self.kernel.to_dict(),
            "centers": self.centers.points.tolist(),
            "p": self.p.tolist(),
            "D": self.model.D.tolist(),
        }

    @classmethod
    def from_dict(cls, data, model):
        missing = {"kernel", "centers", "p"} - set(data)
        if missing:
            raise InputError(f"value-function file lacks fields {sorted(missing)}")
        centers = CenterSet.from_points(data["centers"])
        if centers.dim != model.n:
            raise InputError(f"value function has dimension {centers.dim}, model has {model.n}")
        spec = KernelSpec.from_dict(data["kernel"], centers.dim)
        return cls(np.asarray(data["p"], dtype=float), spec, centers, model)


def equilibrium_residuals(vf, P_target):
    origin = np.zeros(vf.model.n)
    return {
        "value_at_origin": float(abs(vf.value(origin))),
        "gradient_norm": float(np.linalg.norm(vf.gradient(origin))),
        "hessian_residual": float(np.linalg.norm(vf.hessian(origin) - np.asarray(P_target), "fro")),
    }


def extract(p, problem, check=True):
    """Bind optimal coefficients to a :class:`ValueFunction` and check the origin constraints."""
    vf = ValueFunction(p, problem.kernel, problem.centers, problem.model)
    if check and problem.hessian_constrained:
        eq = equilibrium_residuals(vf, problem.P_target)
        # entrywise relaxation eps bounds the Frobenius mismatch by n * eps
        hess_bound = problem.n * problem.hessian_relaxation + 1e-4
        bad = []
        if eq["value_at_origin"] >= 1e-6:
            bad.append("V(0)")
        if eq["gradient_norm"] >= 1e-6:
            bad.append("grad V(0)")
        if eq["hessian_residual"] > hess_bound:
            bad.append("hess V(0)")
        if bad:
            raise SynthesisError(f"origin constraints not met: {', '.join(bad)}", eq)
    return vf


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    value_function: ValueFunction
    riccati: RiccatiSolution
    problem: SynthesisProblem
    program: ConicProgram
    stats: dict

    @property
    def P(self):
        return self.riccati.P


def synthesize(model, kernel, centers, grid=None, settings=None, hessian_relaxation=0.0):
    """Linearize, solve the Riccati equation, assemble, solve and extract."""
    settings = settings or SolverSettings()
    lin = linearize(model)
    ric = solve_are(lin, model.D)
    problem = assemble(model, kernel, centers, grid, ric.P, hessian_relaxation)
    program = to_conic(problem, precondition=settings.precondition)
    p, stats = solve(program, settings)
    vf = extract(p, problem)
    return SynthesisResult(vf, ric, problem, program, stats)
