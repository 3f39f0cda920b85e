"""Closed-loop simulation of ``xdot = f(x) + g(x) u(x)`` from batches of initial conditions."""

from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid, solve_ivp

from .errors import BlowUpError, InputError
from .io import atomic_write_text

BLOWUP_NORM = 1e6
SETTLING_THRESHOLD = 1e-3


def circle_points(radius, count):
    """``r (cos th_k, sin th_k)`` with ``th_k = 2 pi k / count``, ``k = 0..count-1``."""
    if count < 1 or not radius > 0:
        raise InputError("circle needs radius > 0 and count >= 1")
    theta = 2 * np.pi * np.arange(count) / count
    return radius * np.column_stack([np.cos(theta), np.sin(theta)]), np.degrees(theta)


def span_points(start, stop, count, exclude_origin=False):
    start = np.atleast_1d(np.asarray(start, dtype=float))
    stop = np.atleast_1d(np.asarray(stop, dtype=float))
    pts = start + np.linspace(0.0, 1.0, count)[:, None] * (stop - start)
    if exclude_origin:
        pts = pts[np.linalg.norm(pts, axis=1) > 1e-12]
    return pts


@dataclass(frozen=True)
class SimulationConfig:
    initial_conditions: np.ndarray
    horizon: float = 10.0
    method: str = "rk4"
    step: float = 1e-3
    rtol: float = 1e-8
    atol: float = 1e-12
    samples: int = 1001
    labels: Optional[tuple] = None
    blowup_norm: float = BLOWUP_NORM

    def __post_init__(self):
        ics = np.atleast_2d(np.asarray(self.initial_conditions, dtype=float))
        if ics.size == 0:
            raise InputError("no initial conditions given")
        ics.setflags(write=False)
        object.__setattr__(self, "initial_conditions", ics)
        if not self.horizon > 0:
            raise InputError("horizon must be > 0")
        if self.method == "rk4":
            if not 0 < self.step <= self.horizon:
                raise InputError("fixed step must satisfy 0 < step <= horizon")
        elif self.method == "adaptive":
            if not 0 < self.rtol <= 1e-2:
                raise InputError("adaptive rtol must lie in (0, 1e-2]")
        else:
            raise InputError(f"unknown integration method {self.method!r}")
        if self.samples < 2:
            raise InputError("need at least 2 output samples")
        if self.labels is not None and len(self.labels) != len(ics):
            raise InputError("one label per initial condition")


@dataclass
class Trajectory:
    x0: np.ndarray
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    running_cost: np.ndarray
    value: Optional[np.ndarray] = None
    left_domain: bool = False
    exit_time: Optional[float] = None
    label: object = None

    @property
    def norms(self):
        return np.linalg.norm(self.x, axis=1)

    @property
    def final_norm(self):
        return float(self.norms[-1])

    @property
    def total_cost(self):
        return float(self.running_cost[-1])

    def settling_time(self, threshold=SETTLING_THRESHOLD):
        """First sampled time with ``|x| <= threshold``; the horizon if never reached."""
        hit = np.nonzero(self.norms <= threshold)[0]
        return float(self.t[hit[0]]) if hit.size else float(self.t[-1])

    def to_csv(self):
        n, m = self.x.shape[1], self.u.shape[1]
        buf = _io.StringIO()
        w = csv.writer(buf)
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)] + ["norm", "V"])
        V = self.value if self.value is not None else np.full(len(self.t), np.nan)
        for k in range(len(self.t)):
            w.writerow([repr(float(self.t[k]))] + [repr(float(v)) for v in self.x[k]]
                       + [repr(float(v)) for v in self.u[k]] + [repr(float(self.norms[k])), repr(float(V[k]))])
        return buf.getvalue()

    def write_csv(self, path):
        atomic_write_text(path, self.to_csv())


def fit_decay(t, norms, x0_norm, t_start, floor=1e-12):
    """Least-squares fit of ``log|x(t)| = log(alpha |x0|) - beta t`` on ``t >= t_start``.

    Returns ``(alpha, beta)``; NaNs when fewer than two usable samples remain.
    """
    mask = (t >= t_start) & (norms > floor)
    if mask.sum() < 2 or x0_norm <= 0:
        return math.nan, math.nan
    slope, intercept = np.polyfit(t[mask], np.log(norms[mask]), 1)
    return float(math.exp(intercept) / x0_norm), float(-slope)


@dataclass
class SimulationResult:
    trajectories: list
    horizon: float
    decay_fits: list = field(default_factory=list)

    @property
    def final_norms(self):
        return np.array([tr.final_norm for tr in self.trajectories])

    @property
    def max_final_norm(self):
        return float(self.final_norms.max())

    @property
    def mean_final_norm(self):
        return float(self.final_norms.mean())

    @property
    def decay(self):
        """Batch ``(alpha, beta)``: worst case over trajectories (largest alpha, smallest beta)."""
        valid = [(a, b) for a, b in self.decay_fits if math.isfinite(b)]
        if not valid:
            return math.nan, math.nan
        return max(a for a, _ in valid), min(b for _, b in valid)

    def summary(self):
        rows = []
        for k, (tr, (a, b)) in enumerate(zip(self.trajectories, self.decay_fits)):
            rows.append({
                "index": k,
                "label": tr.label,
                "x0": tr.x0.tolist(),
                "final_state": tr.x[-1].tolist(),
                "final_norm": tr.final_norm,
                "cost": tr.total_cost,
                "settling_time": tr.settling_time(),
                "left_domain": tr.left_domain,
                "decay_alpha": a,
                "decay_beta": b,
            })
        alpha, beta = self.decay
        return {
            "horizon": self.horizon,
            "count": len(rows),
            "trajectories": rows,
            "max_final_norm": self.max_final_norm,
            "mean_final_norm": self.mean_final_norm,
            "decay_alpha": alpha,
            "decay_beta": beta,
        }


def _loop_feedback(feedback):
    return lambda X: np.stack([np.atleast_1d(np.asarray(feedback(x), dtype=float)) for x in X])


def _rk4_batch(model, feedback, X0, config):
    K = X0.shape[0]
    steps = max(1, int(math.ceil(config.horizon / config.step - 1e-9)))
    h = config.horizon / steps
    sample_steps = np.unique(np.round(np.linspace(0, steps, config.samples)).astype(int))
    out = np.empty((len(sample_steps), K, model.n))
    active = np.ones(K, dtype=bool)
    blown = {}

    def rhs(X):
        return model.closed_loop(X, feedback(X))

    x = X0.copy()
    s = 0
    for k in range(steps + 1):
        if k == sample_steps[s]:
            out[s] = x
            s += 1
        if k == steps:
            break
        xa = x[active]
        # stages may overflow on the step that escapes; the non-finite norm is caught below
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = rhs(xa)
            k2 = rhs(xa + 0.5 * h * k1)
            k3 = rhs(xa + 0.5 * h * k2)
            k4 = rhs(xa + h * k3)
            xa = xa + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            nrm = np.linalg.norm(xa, axis=1)
        bad = ~np.isfinite(nrm) | (nrm > config.blowup_norm)
        idx = np.nonzero(active)[0]
        if bad.any():
            for i in idx[bad]:
                blown[int(i)] = (k + 1) * h
            xa[bad] = x[idx[bad]]  # freeze at the last finite state
        x[active] = xa
        active[idx[bad]] = False
        if not active.any():
            out[s:] = x
            break
    return h * sample_steps, out, blown


def _adaptive_one(model, feedback, x0, config, t_eval):
    def rhs(_t, x):
        X = x[None, :]
        return model.closed_loop(X, feedback(X))[0]

    def escape(_t, x):
        return np.linalg.norm(x) - config.blowup_norm

    escape.terminal = True
    sol = solve_ivp(rhs, (0.0, config.horizon), x0, method="RK45", t_eval=t_eval,
                    rtol=config.rtol, atol=config.atol, events=escape)
    if sol.status == 1 or not sol.success:
        t_fail = float(sol.t_events[0][0]) if sol.t_events and len(sol.t_events[0]) else float(sol.t[-1])
        X = np.full((len(t_eval), model.n), np.nan)
        X[: sol.y.shape[1]] = sol.y.T
        X[sol.y.shape[1]:] = sol.y[:, -1] if sol.y.size else x0
        return X, t_fail
    return sol.y.T, None


def _finish(model, feedback, t, X, x0, label, value):
    U = feedback(X)
    running = model.cost(X) + 0.5 * np.einsum("ki,ij,kj->k", U, model.D, U)
    cost = cumulative_trapezoid(running, t, initial=0.0)
    lo, hi = model.domain[:, 0], model.domain[:, 1]
    outside = np.nonzero(((X < lo) | (X > hi)).any(axis=1))[0]
    V = value(X) if value is not None else None
    return Trajectory(
        x0=np.asarray(x0, dtype=float), t=t, x=X, u=U, running_cost=cost, value=V,
        left_domain=bool(outside.size), exit_time=float(t[outside[0]]) if outside.size else None, label=label,
    )


def _simulate(model, feedback, X0, config, value, labels):
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    if X0.shape[1] != model.n:
        raise InputError(f"initial conditions have dimension {X0.shape[1]}, model expects {model.n}")
    labels = labels if labels is not None else [None] * len(X0)
    if config.method == "rk4":
        t, states, blown = _rk4_batch(model, feedback, X0, config)
        paths = [states[:, k, :] for k in range(len(X0))]
    else:
        t = np.linspace(0.0, config.horizon, config.samples)
        paths, blown = [], {}
        for k, x0 in enumerate(X0):
            X, t_fail = _adaptive_one(model, feedback, x0, config, t)
            paths.append(X)
            if t_fail is not None:
                blown[k] = t_fail
    if blown:
        failures = [(k, X0[k].tolist(), tb) for k, tb in sorted(blown.items())]
        desc = "; ".join(f"#{k} from {x0} at t={tb:.4g}" for k, x0, tb in failures)
        raise BlowUpError(f"closed loop diverged: {desc}", failures)
    return [_finish(model, feedback, t, X, X0[k], labels[k], value) for k, X in enumerate(paths)]


def integrate(model, feedback, x0, config, value=None):
    """Integrate one closed-loop trajectory.  ``feedback`` maps a single state to ``R^m``."""
    (tr,) = _simulate(model, _loop_feedback(feedback), [x0], config, value, None)
    return tr


def run_batch(model, feedback, config, value=None, vectorized=True):
    """Integrate every initial condition in ``config`` and collect statistics.

    With ``vectorized`` the feedback receives a ``(K, n)`` array of states and
    returns ``(K, m)`` (true for :class:`ValueFunction.control` and built-in
    exact controls).  ``value``, when given, is recorded along each trajectory.
    """
    fb = feedback if vectorized else _loop_feedback(feedback)
    trajs = _simulate(model, fb, config.initial_conditions, config, value, config.labels)
    fits = [fit_decay(tr.t, tr.norms, float(np.linalg.norm(tr.x0)), config.horizon / 2) for tr in trajs]
    return SimulationResult(trajs, config.horizon, fits)


def cost_of_trajectory(model, trajectory):
    """Trapezoidal quadrature of ``q(x) + u'Du/2`` over the recorded horizon."""
    X, U = trajectory.x, trajectory.u
    running = model.cost(X) + 0.5 * np.einsum("ki,ij,kj->k", U, model.D, U)
    return float(np.trapezoid(running, trajectory.t))


def batch_to_csv(result):
    """All trajectories in one long-format table with ``ic`` and ``label`` columns."""
    first = result.trajectories[0]
    n, m = first.x.shape[1], first.u.shape[1]
    buf = _io.StringIO()
    w = csv.writer(buf)
    w.writerow(["ic", "label", "t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)]
               + ["norm", "V"])
    for k, tr in enumerate(result.trajectories):
        V = tr.value if tr.value is not None else np.full(len(tr.t), np.nan)
        label = "" if tr.label is None else tr.label
        norms = tr.norms
        for j in range(len(tr.t)):
            w.writerow([k, label, repr(float(tr.t[j]))] + [repr(float(v)) for v in tr.x[j]]
                       + [repr(float(v)) for v in tr.u[j]] + [repr(float(norms[j])), repr(float(V[j]))])
    return buf.getvalue()
