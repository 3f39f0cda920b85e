"""Post-synthesis verification: residuals, LMI margins, comparisons, bounds, studies."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import kernel as kern
from .errors import InputError, SynthesisError
from .kernel import CenterSet, KernelSpec, interior_fill_distance
from .riccati import solve_are
from .simulate import SETTLING_THRESHOLD
from .synthesis import SolverSettings, equilibrium_residuals, synthesize
from .system import hjb_expression, linearize


def hjb_residual(vf, model, X):
    """``R(x) = dV'f - dV'g D^{-1} g'dV / 2 + q`` for one point or a batch."""
    X = np.asarray(X, dtype=float)
    return hjb_expression(model, X, vf.gradient(X))


def lmi_matrix(vf, model, X):
    """The continuous-x LMI matrix ``[[2(dV'f + q), dV'g], [g'dV, D]]`` (batched)."""
    X = np.asarray(X, dtype=float)
    dV = vf.gradient(X)
    gtv = np.einsum("...ij,...i->...j", model.input_map(X), dV)
    top = 2.0 * (np.einsum("...i,...i->...", dV, model.drift(X)) + model.cost(X))
    m = model.m
    out = np.empty(X.shape[:-1] + (1 + m, 1 + m))
    out[..., 0, 0] = top
    out[..., 0, 1:] = gtv
    out[..., 1:, 0] = gtv
    out[..., 1:, 1:] = model.D
    return out


def lmi_margin(vf, model, X):
    """Minimum eigenvalue of the LMI matrix at each point."""
    return np.linalg.eigvalsh(lmi_matrix(vf, model, X))[..., 0]


def equilibrium_check(vf, P_target):
    return equilibrium_residuals(vf, P_target)


def dense_grid(domain, per_axis):
    domain = np.asarray(domain, dtype=float)
    return CenterSet.uniform_grid(domain, [per_axis] * domain.shape[0]).points


def boundary_points(domain, per_side=41):
    """Samples on the faces of the domain box."""
    domain = np.asarray(domain, dtype=float)
    n = domain.shape[0]
    if n == 1:
        return domain.T.copy()
    pts = []
    grid = dense_grid(domain, per_side)
    for k in range(n):
        for side in (0, 1):
            face = grid[np.isclose(grid[:, k], domain[k, side])]
            pts.append(face)
    return np.unique(np.vstack(pts), axis=0)


def residual_scan(vf, model, X):
    R = hjb_residual(vf, model, X)
    margins = lmi_margin(vf, model, X)
    return {
        "points": int(len(R)),
        "min": float(R.min()),
        "max": float(R.max()),
        "eps_hat": float(max(0.0, -R.min())),
        "lmi_min_eig": float(margins.min()),
    }


def compare_exact(vf, model, X):
    """Errors against the model's exact/reference solution on a grid of points."""
    if not model.has_exact:
        return {"applicable": False}
    X = np.asarray(X, dtype=float)
    origin = np.zeros(model.n)
    V = vf.value(X) - vf.value(origin)
    dv_err = np.linalg.norm(vf.gradient(X) - model.exact_gradient(X), axis=-1)
    u_err = np.linalg.norm(vf.control(X) - model.exact_control(X), axis=-1)
    v_err = np.abs(V - model.exact_value(X))
    return {
        "applicable": True,
        "points": int(len(X)),
        "value_error_max": float(v_err.max()),
        "value_error_mean": float(v_err.mean()),
        "gradient_error_max": float(dv_err.max()),
        "gradient_error_mean": float(dv_err.mean()),
        "control_error_max": float(u_err.max()),
        "control_error_mean": float(u_err.mean()),
    }


def boundary_dominance(vf, model, per_side=41):
    """Whether ``V_hat >= V*`` on sampled boundary points (``None`` without an exact solution)."""
    if not model.has_exact:
        return None
    B = boundary_points(model.domain, per_side)
    return bool(np.all(vf.value(B) >= model.exact_value(B) - 1e-12))


def suboptimality_estimate(vf, model, batch, eps_hat, threshold=SETTLING_THRESHOLD):
    """Per-trajectory bound ``eps_hat * T_hat`` plus the empirical cost gap when ``V*`` is known."""
    rows = []
    for tr in batch.trajectories:
        T_hat = tr.settling_time(threshold)
        row = {
            "x0": tr.x0.tolist(),
            "settling_time": T_hat,
            "settled": bool(tr.norms.min() <= threshold),
            "bound": float(eps_hat * T_hat),
            "cost": tr.total_cost,
            "value_hat": float(vf.value(tr.x0)),
        }
        if model.has_exact:
            v_star = float(model.exact_value(tr.x0))
            row["value_star"] = v_star
            row["cost_gap"] = tr.total_cost - v_star
        rows.append(row)
    return rows


def lyapunov_decrease_violation(trajectory):
    """Largest increase of ``V`` between consecutive samples (0 when nonincreasing)."""
    if trajectory.value is None:
        raise InputError("trajectory was simulated without a value function")
    return float(max(0.0, np.diff(trajectory.value).max(initial=0.0)))


@dataclass
class VerificationReport:
    equilibrium: dict
    residual: dict
    lmi: dict
    comparison: dict
    suboptimality: list = field(default_factory=list)
    stability: dict = field(default_factory=dict)
    boundary_dominance: Optional[bool] = None
    P_target: Optional[list] = None

    def to_dict(self):
        return asdict(self)

    def text_summary(self):
        eq = self.equilibrium
        lines = [
            "Equilibrium constraints:",
            f"  |V(0)|              = {eq['value_at_origin']:.3e}",
            f"  |grad V(0)|         = {eq['gradient_norm']:.3e}",
            f"  |hess V(0) - P|_F   = {eq['hessian_residual']:.3e}",
            "HJB residual R(x):",
            f"  collocation points: min {self.residual['collocation']['min']:.3e}, "
            f"eps_hat {self.residual['collocation']['eps_hat']:.3e}",
            f"  dense mesh:         min {self.residual['dense']['min']:.3e}, "
            f"max {self.residual['dense']['max']:.3e}, eps_hat {self.residual['dense']['eps_hat']:.3e}",
            "LMI minimum eigenvalue:",
            f"  collocation points: {self.lmi['collocation_min_eig']:.3e}",
            f"  dense mesh:         {self.lmi['dense_min_eig']:.3e}",
        ]
        if self.comparison.get("applicable"):
            c = self.comparison
            lines += [
                "Comparison with the reference solution:",
                f"  max |V - V*| = {c['value_error_max']:.3g}, mean {c['value_error_mean']:.3g}",
                f"  max |u - u*| = {c['control_error_max']:.3g}, mean {c['control_error_mean']:.3g}",
            ]
        if self.stability:
            s = self.stability
            lines.append(f"Closed loop: max final norm {s['max_final_norm']:.3e}, "
                         f"mean {s['mean_final_norm']:.3e}, decay fit alpha {s['alpha']:.3g} beta {s['beta']:.3g}")
        if self.suboptimality:
            worst = max(r["bound"] for r in self.suboptimality)
            lines.append(f"Suboptimality bound eps_hat * T_hat: max {worst:.3e} over {len(self.suboptimality)} ICs")
        if self.boundary_dominance is not None:
            lines.append(f"V_hat >= V* on the boundary: {self.boundary_dominance}")
        return "\n".join(lines) + "\n"


def _grid_counts(points):
    return [len(np.unique(np.round(points[:, k], 12))) for k in range(points.shape[1])]


def build_report(vf, model, P_target, collocation_points, batch=None, dense_factor=4):
    """Assemble a :class:`VerificationReport`.

    The dense mesh refines the collocation spacing ``dense_factor`` times per
    axis.  ``eps_hat`` for the suboptimality bound is taken from the dense
    mesh, since collocation certifies nothing between nodes.
    """
    colloc = np.asarray(collocation_points, dtype=float)
    per_axis = max(max(_grid_counts(colloc)) - 1, 1) * dense_factor + 1
    dense = dense_grid(model.domain, per_axis)
    col_scan = residual_scan(vf, model, colloc)
    dense_scan = residual_scan(vf, model, dense)
    comparison = compare_exact(vf, model, dense_grid(model.domain, 201 if model.n == 1 else 51))
    report = VerificationReport(
        equilibrium=equilibrium_check(vf, P_target),
        residual={"collocation": col_scan, "dense": dense_scan},
        lmi={"collocation_min_eig": col_scan["lmi_min_eig"], "dense_min_eig": dense_scan["lmi_min_eig"]},
        comparison=comparison,
        boundary_dominance=boundary_dominance(vf, model),
        P_target=np.asarray(P_target).tolist(),
    )
    if batch is not None:
        alpha, beta = batch.decay
        report.stability = {
            "alpha": alpha,
            "beta": beta,
            "max_final_norm": batch.max_final_norm,
            "mean_final_norm": batch.mean_final_norm,
        }
        report.suboptimality = suboptimality_estimate(vf, model, batch, dense_scan["eps_hat"])
    return report


def _l2_weights(domain, per_axis):
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in np.asarray(domain)]
    ws = []
    for a in axes:
        w = np.full(len(a), a[1] - a[0])
        w[[0, -1]] *= 0.5
        ws.append(w)
    W = ws[0]
    for w in ws[1:]:
        W = np.multiply.outer(W, w)
    return W.ravel()


@dataclass
class ConvergenceStudy:
    entries: list
    slope: float

    def to_dict(self):
        return {"entries": self.entries, "slope": self.slope}


def convergence_study(model, kernel, M_values, settings=None, grid=None, quad_per_axis=None,
                      hessian_relaxation=0.0):
    """Gradient L2 error against the model's reference solution as the center count grows.

    Centers are uniform tensor grids over the domain, so every ``M`` must be
    a perfect ``n``-th power.  Collocation uses the centers unless ``grid``
    (a :class:`CollocationGrid`) is given.  The log-log slope is fitted over
    successful runs only.
    """
    if not model.has_exact:
        raise InputError("convergence study needs a model with a reference solution")
    settings = settings or SolverSettings()
    n = model.n
    quad_per_axis = quad_per_axis or (401 if n == 1 else 41)
    Xq = dense_grid(model.domain, quad_per_axis)
    Wq = _l2_weights(model.domain, quad_per_axis)
    ref = model.exact_gradient(Xq)
    entries = []
    for M in M_values:
        per_axis = int(round(M ** (1.0 / n)))
        if per_axis**n != M:
            raise InputError(f"M={M} is not a perfect {n}-th power")
        entry = {"M": int(M), "fill_distance": interior_fill_distance(model.domain, per_axis)}
        if M < kern.equality_row_count(n):
            entry.update(status="infeasible", error=None, reason="fewer centers than equality rows")
            entries.append(entry)
            continue
        centers = CenterSet.uniform_grid(model.domain, [per_axis] * n)
        try:
            res = synthesize(model, kernel, centers, grid, settings, hessian_relaxation)
        except SynthesisError as exc:
            entry.update(status="failed", error=None, reason=str(exc))
            entries.append(entry)
            continue
        diff = res.value_function.gradient(Xq) - ref
        err = math.sqrt(float(np.sum(Wq * np.einsum("ak,ak->a", diff, diff))))
        entry.update(status="ok", error=err, solve_time=res.stats["solve_time"])
        entries.append(entry)
    ok = [e for e in entries if e["status"] == "ok" and e["error"] > 0]
    slope = math.nan
    if len(ok) >= 2:
        slope = float(np.polyfit(np.log([e["M"] for e in ok]), np.log([e["error"] for e in ok]), 1)[0])
    return ConvergenceStudy(entries, slope)


def lyapunov_mode_check(model, kernel=None, centers=None, settings=None, tol=1e-6, rng=0):
    """Run the pipeline on an uncontrolled, asymptotically stable system.

    With ``g = 0`` the Riccati equation is the Lyapunov equation and the HJB
    inequality is ``dV'f + q >= 0``.  Raises :class:`InputError` when ``g`` is
    not identically zero on samples or the linearization is not Hurwitz.
    """
    rng = np.random.default_rng(rng)
    samples = rng.uniform(model.domain[:, 0], model.domain[:, 1], size=(200, model.n))
    if np.abs(model.input_map(np.vstack([np.zeros(model.n), samples]))).max() > 0:
        raise InputError("Lyapunov mode requires g(x) = 0")
    lin = linearize(model)
    eig = np.linalg.eigvals(lin.A)
    if eig.real.max() >= 0:
        raise InputError("Lyapunov mode requires an asymptotically stable linearization")
    kernel = kernel or KernelSpec.polynomial(model.n)
    if centers is None:
        centers = CenterSet.uniform_grid(model.domain, [25 if model.n == 1 else 9] * model.n)
    ric = solve_are(lin, model.D)
    lyap = lin.A.T @ ric.P + ric.P @ lin.A + lin.Q
    res = synthesize(model, kernel, centers, settings=settings)
    vf = res.value_function
    colloc = res.problem.grid.points
    orbital = np.einsum("ak,ak->a", vf.gradient(colloc), model.drift(colloc)) + model.cost(colloc)
    dense = dense_grid(model.domain, 201 if model.n == 1 else 41)
    orbital_dense = np.einsum("ak,ak->a", vf.gradient(dense), model.drift(dense)) + model.cost(dense)
    eq = equilibrium_check(vf, ric.P)
    lyap_res = float(np.linalg.norm(lyap, "fro"))
    return {
        "P": ric.P.tolist(),
        "riccati_method": ric.method.value,
        "lyapunov_residual": lyap_res,
        "equilibrium": eq,
        "orbital_min_collocation": float(orbital.min()),
        "orbital_min_dense": float(orbital_dense.min()),
        "passed": bool(lyap_res < 1e-8 and orbital.min() >= -tol and eq["hessian_residual"] < 1e-4),
        "value_function": vf,
    }
