"""Experiment configuration: strict JSON schema and builders for the pipeline objects."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import system as sysm
from .errors import InputError
from .kernel import CenterSet, KernelSpec
from .simulate import SimulationConfig, circle_points, span_points
from .synthesis import CollocationGrid, SolverSettings

PRESETS = ("poly1d", "radial2d", "vanderpol")
Matrix = list[list[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class KernelConfig(_Strict):
    family: Literal["polynomial", "gaussian"] = "polynomial"
    degree: int = Field(4, ge=2)
    offset: float = Field(1.0, gt=0)
    bandwidth: float = Field(1.0, gt=0)

    def build(self, dim):
        if self.family == "polynomial":
            return KernelSpec.polynomial(dim, self.degree, self.offset)
        return KernelSpec.gaussian(dim, self.bandwidth)


class PointSetConfig(_Strict):
    """A uniform tensor grid (``counts`` per axis, ``bounds`` defaulting to the domain) or explicit points."""

    type: Literal["grid", "list"] = "grid"
    counts: Optional[list[int]] = None
    bounds: Optional[Matrix] = None
    points: Optional[Matrix] = None

    @model_validator(mode="after")
    def _check(self):
        if self.type == "grid":
            if not self.counts or min(self.counts) < 1:
                raise ValueError("grid needs positive per-axis counts")
            if self.points is not None:
                raise ValueError("grid does not take explicit points")
        elif not self.points:
            raise ValueError("list needs at least one point")
        return self

    def points_for(self, domain):
        if self.type == "list":
            return np.asarray(self.points, dtype=float)
        bounds = self.bounds if self.bounds is not None else domain
        return CenterSet.uniform_grid(bounds, self.counts).points


class SolverConfig(_Strict):
    backend: Literal["clarabel", "scs"] = "clarabel"
    tolerance: float = Field(1e-4, gt=0, lt=1)
    max_iterations: int = Field(50000, ge=1)
    precondition: bool = False

    def build(self, tolerance=None, verbose=False):
        return SolverSettings(
            backend=self.backend,
            tolerance=tolerance if tolerance is not None else self.tolerance,
            max_iterations=self.max_iterations,
            precondition=self.precondition,
            verbose=verbose,
        )


class InitialConditions(_Strict):
    type: Literal["list", "circle", "span"] = "list"
    points: Optional[Matrix] = None
    radius: Optional[float] = None
    count: Optional[int] = None
    start: Optional[list[float]] = None
    stop: Optional[list[float]] = None
    exclude_origin: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.type == "list" and not self.points:
            raise ValueError("initial condition list is empty")
        if self.type == "circle" and (self.radius is None or not self.radius > 0 or not self.count or self.count < 1):
            raise ValueError("circle needs radius > 0 and count >= 1")
        if self.type == "span" and (self.start is None or self.stop is None or not self.count or self.count < 2):
            raise ValueError("span needs start, stop and count >= 2")
        return self

    def build(self):
        """``(points, labels)``; circle points are labelled by angle in degrees."""
        if self.type == "list":
            pts = np.asarray(self.points, dtype=float)
            return pts, None
        if self.type == "circle":
            pts, deg = circle_points(self.radius, self.count)
            return pts, tuple(f"{d:g}deg" for d in deg)
        pts = span_points(self.start, self.stop, self.count, self.exclude_origin)
        if len(pts) == 0:
            raise InputError("span produced no initial conditions")
        return pts, None


class SimulationSettings(_Strict):
    initial_conditions: InitialConditions
    horizon: float = Field(10.0, gt=0)
    method: Literal["rk4", "adaptive"] = "rk4"
    step: float = Field(1e-3, gt=0)
    rtol: float = Field(1e-8, gt=0)
    atol: float = Field(1e-12, gt=0)
    samples: int = Field(1001, ge=2)

    def build(self, dim):
        pts, labels = self.initial_conditions.build()
        if pts.ndim != 2 or pts.shape[1] != dim:
            raise InputError(f"initial conditions must have dimension {dim}")
        return SimulationConfig(pts, self.horizon, self.method, self.step, self.rtol, self.atol,
                                self.samples, labels)


class ExperimentConfig(_Strict):
    system: Literal["poly1d", "radial2d", "vanderpol", "linear"]
    system_params: dict[str, Union[float, Matrix]] = Field(default_factory=dict)
    kernel: KernelConfig = KernelConfig()
    centers: PointSetConfig
    collocation: Union[Literal["centers"], PointSetConfig] = "centers"
    Q: Optional[Matrix] = None
    D: Optional[Matrix] = None
    R: Optional[Matrix] = None
    hessian_relaxation: float = Field(0.0, ge=0)
    solver: SolverConfig = SolverConfig()
    simulation: Optional[SimulationSettings] = None
    output_dir: str = "out"
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.D is not None and self.R is not None:
            raise ValueError("give the control weight as D or R, not both")
        if self.system == "linear" and ("A" not in self.system_params or self.Q is None):
            raise ValueError("linear system needs system_params.A and Q")
        return self

    @property
    def control_weight(self):
        return self.D if self.D is not None else self.R

    def build_model(self):
        params = dict(self.system_params)
        if self.system == "vanderpol":
            return sysm.builtin_vdp(mu=params.get("mu", 1.0), Q=self.Q, R=self.control_weight)
        if self.system == "linear":
            if "A" not in params or self.Q is None:
                raise InputError("system 'linear' needs system_params.A and Q")
            model = sysm.builtin_linear(params["A"], self.Q, params.get("B"))
        else:
            if params:
                raise InputError(f"system {self.system!r} takes no parameters")
            model = sysm.builtin(self.system)
            if self.Q is not None:
                model = sysm.quadratic_cost(model, self.Q)
        if self.control_weight is not None:
            model = sysm.with_control_weight(model, self.control_weight)
        return model

    def build_kernel(self, dim):
        return self.kernel.build(dim)

    def build_centers(self, model):
        cfg = self.centers
        if cfg.type == "grid":
            bounds = cfg.bounds if cfg.bounds is not None else model.domain
            if len(cfg.counts) not in (1, model.n) or np.asarray(bounds).shape != (model.n, 2):
                raise InputError(f"center grid does not match the system dimension {model.n}")
            centers = CenterSet.uniform_grid(bounds, cfg.counts)
        else:
            centers = CenterSet.from_points(cfg.points)
        if centers.dim != model.n:
            raise InputError(f"centers have dimension {centers.dim}, system has {model.n}")
        return centers

    def build_grid(self, model, centers):
        if self.collocation == "centers":
            return CollocationGrid.same_as_centers(centers)
        pts = self.collocation.points_for(model.domain)
        if pts.shape[1] != model.n:
            raise InputError(f"collocation points have dimension {pts.shape[1]}, system has {model.n}")
        return CollocationGrid(pts, self.collocation.model_dump(mode="json", exclude_none=True))

    def build_simulation(self, dim):
        if self.simulation is None:
            raise InputError("config has no simulation block")
        return self.simulation.build(dim)

    def to_json(self):
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def parse_config(data):
    """Validate a dict; schema violations become :class:`InputError`."""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise InputError(f"invalid config: {exc}") from None


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"config is not valid JSON: {exc}") from None
    return parse_config(data)


def preset_text(name):
    if name not in PRESETS:
        raise InputError(f"unknown experiment {name!r}; choose one of {list(PRESETS)}")
    return resources.files("hjbk").joinpath("presets").joinpath(f"{name}.json").read_text()


def load_preset(name):
    return parse_config(json.loads(preset_text(name)))
