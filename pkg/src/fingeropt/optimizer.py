"""Constrained density update (moving-asymptote style) and the run loop.

Each iteration builds a separable convex approximation of the objective
around the current design with per-element moving asymptotes, keeps the
single volume constraint linear, and solves the subproblem through its
dual: for a given multiplier the per-element minimizer is a monotone
root-find inside the box bounds, and the multiplier itself is bisected
until the volume bound is tight. This handles the sign-indefinite
gradients of the displacement terms, which rule out the classic
optimality-criteria update.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .domain import DomainSpec, Mesh, build_domain, make_selector
from .fem import FORCE, PRESCRIBED, DensityField, LoadCase, MaterialParams
from .sensitivity import (
    FilterKernel,
    ObjectiveParams,
    apply_filter,
    chain_rule,
    evaluate_objective,
    gradient,
    physical_field,
)

logger = logging.getLogger(__name__)

PASSIVE = "passive"
ACTIVE = "active"

#: Force input faces used per formulation, tip to base.
FORCE_CASES = {PASSIVE: 6, ACTIVE: 3}


class ConfigError(ValueError):
    """Raised for invalid run configurations."""


class StepError(RuntimeError):
    """Raised when the constrained update cannot satisfy the volume bound."""


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one optimization run."""

    formulation: str = PASSIVE
    volume_fraction: float = 0.35
    input_displacement: float | None = None  # mm, active formulation only
    seed: int = 0
    init_style: str = "smoothed_noise"
    max_iters: int = 300
    move_limit: float = 0.2
    convergence_tol: float = 0.01
    filter_radius: float = 2.5
    output_weight: float = 1.0e5
    force_newtons: float = 1.0
    domain: DomainSpec = field(default_factory=DomainSpec.create)
    material: MaterialParams = field(default_factory=MaterialParams)

    def validate(self) -> None:
        if self.formulation not in (PASSIVE, ACTIVE):
            raise ConfigError(f"unknown formulation {self.formulation!r}")
        if not 0.05 <= self.volume_fraction <= 1.0:
            raise ConfigError("volume_fraction must lie in [0.05, 1.0]")
        if self.formulation == ACTIVE:
            if self.input_displacement is None or self.input_displacement <= 0:
                raise ConfigError("active formulation requires a positive input_displacement")
        elif self.input_displacement is not None:
            raise ConfigError("passive formulation must not set input_displacement")
        if self.init_style not in ("uniform", "smoothed_noise"):
            raise ConfigError(f"unknown init_style {self.init_style!r}")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be non-negative")
        if not 0 < self.move_limit <= 1:
            raise ConfigError("move_limit must lie in (0, 1]")
        if self.force_newtons <= 0:
            raise ConfigError("force_newtons must be positive")
        self.domain.validate()
        self.material.validate()

    @property
    def sweep_value(self) -> float:
        """The swept campaign variable for this formulation."""
        if self.formulation == ACTIVE:
            return float(self.input_displacement)
        return float(self.volume_fraction)


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    phi: float
    mean_output_disp: float
    strain_energy: float
    volume_fraction: float
    max_density_change: float


@dataclass
class RunResult:
    """Full record of one optimization run."""

    config: RunConfig
    history: list[HistoryRow]
    final_rho: DensityField
    converged: bool
    wall_time: float

    @property
    def iterations(self) -> int:
        return len(self.history) - 1

    @property
    def final(self) -> HistoryRow:
        return self.history[-1]


def build_objective(mesh: Mesh, config: RunConfig) -> ObjectiveParams:
    """Load cases, output selector and supports for the configured formulation.

    Face forces press into the finger (+x on the grasping edge). The active
    formulation adds the prescribed closing displacement (-x) on the
    actuation face over the outer arm and releases the back slot, which the
    cam carries; the force cases hold the actuation face at zero.
    """
    output = make_selector(mesh, "output")
    cases: list[LoadCase] = []
    for k in range(1, FORCE_CASES[config.formulation] + 1):
        sel = make_selector(mesh, f"F_in{k}")
        cases.append(LoadCase(FORCE, sel, config.force_newtons, (1.0, 0.0), f"F_in{k}"))
    supports = None
    if config.formulation == ACTIVE:
        sel = make_selector(mesh, "actuation")
        cases.append(
            LoadCase(PRESCRIBED, sel, float(config.input_displacement), (-1.0, 0.0), "X_in")
        )
        # The cam drives the outer arm: only the front slot stays fixed.
        supports = mesh.front_slot_dofs
    return ObjectiveParams(w=config.output_weight, load_cases=tuple(cases),
                           output=output, support_dofs=supports)


def init_density(config: RunConfig, mesh: Mesh) -> DensityField:
    """Initial design field: uniform at V_f, or seeded smoothed noise.

    Smoothed noise draws uniform values per design element, filters them at a
    3-element radius, then rescales multiplicatively (with clipping to
    [0.01, 1]) until the design mean hits V_f.
    """
    vf = config.volume_fraction
    if config.init_style == "uniform":
        x = np.full(mesh.n_design, vf)
    else:
        rng = np.random.default_rng(config.seed)
        noise = rng.random(mesh.n_design)
        smooth = apply_filter(FilterKernel.build(mesh, 3.0), noise)
        x = _rescale_to_mean(smooth, vf)
    return DensityField.from_design(mesh, x)


def _rescale_to_mean(x: np.ndarray, target: float,
                     lo: float = 0.01, hi: float = 1.0) -> np.ndarray:
    """Multiplicative rescale with clipping; bisects the scale factor."""

    def mean_at(s: float) -> float:
        return float(np.clip(x * s, lo, hi).mean())

    s_lo, s_hi = 0.0, 1.0
    while mean_at(s_hi) < target:
        s_hi *= 2.0
        if s_hi > 1e12:
            raise ConfigError("cannot rescale initial field to requested mean")
    for _ in range(80):
        s_mid = 0.5 * (s_lo + s_hi)
        if mean_at(s_mid) < target:
            s_lo = s_mid
        else:
            s_hi = s_mid
    return np.clip(x * s_hi, lo, hi)


@dataclass
class MmaUpdater:
    """Moving-asymptote state across iterations of one run."""

    n: int
    move_limit: float = 0.2
    asy_init: float = 0.5
    asy_incr: float = 1.2
    asy_decr: float = 0.7
    raa0: float = 1e-5
    albefa: float = 0.1

    iteration: int = 0
    low: np.ndarray = field(init=False)
    upp: np.ndarray = field(init=False)
    x_prev1: np.ndarray | None = None
    x_prev2: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.low = np.zeros(self.n)
        self.upp = np.ones(self.n)

    def step(
        self,
        x: np.ndarray,
        grad_obj: np.ndarray,
        grad_con: np.ndarray,
        con_value: float,
    ) -> np.ndarray:
        """One constrained update.

        ``grad_con`` must be strictly positive (a volume-type constraint) and
        ``con_value`` is the current constraint value, feasible when <= 0.
        """
        if np.any(grad_con <= 0):
            raise StepError("constraint gradient must be strictly positive")
        self.iteration += 1

        if self.iteration <= 2:
            self.low = x - self.asy_init
            self.upp = x + self.asy_init
        else:
            trend = (x - self.x_prev1) * (self.x_prev1 - self.x_prev2)
            factor = np.ones(self.n)
            factor[trend > 0] = self.asy_incr
            factor[trend < 0] = self.asy_decr
            self.low = x - factor * (self.x_prev1 - self.low)
            self.upp = x + factor * (self.upp - self.x_prev1)
            np.clip(self.low, x - 10.0, x - 0.01, out=self.low)
            np.clip(self.upp, x + 0.01, x + 10.0, out=self.upp)

        alpha = np.maximum.reduce([np.zeros(self.n),
                                   self.low + self.albefa * (x - self.low),
                                   x - self.move_limit])
        beta = np.minimum.reduce([np.ones(self.n),
                                  self.upp - self.albefa * (self.upp - x),
                                  x + self.move_limit])

        gp = np.maximum(grad_obj, 0.0) + 0.001 * np.abs(grad_obj) + self.raa0
        gq = np.maximum(-grad_obj, 0.0) + 0.001 * np.abs(grad_obj) + self.raa0
        p0 = (self.upp - x) ** 2 * gp
        q0 = (x - self.low) ** 2 * gq
        # The constraint stays exactly linear in the subproblem: a . y <= b.
        bound = float(grad_con @ x) - con_value

        low, upp = self.low, self.upp

        def primal(mu: float) -> np.ndarray:
            # Per-element stationarity p0/(u-y)^2 - q0/(y-l)^2 + mu*a = 0 is
            # monotone increasing in y; bisect it on the box, vectorized.
            mua = mu * grad_con
            lo_b = alpha.copy()
            hi_b = beta.copy()
            for _ in range(48):
                mid = 0.5 * (lo_b + hi_b)
                pos = p0 / (upp - mid) ** 2 - q0 / (mid - low) ** 2 + mua >= 0.0
                hi_b = np.where(pos, mid, hi_b)
                lo_b = np.where(pos, lo_b, mid)
            y = 0.5 * (lo_b + hi_b)
            f_alpha = p0 / (upp - alpha) ** 2 - q0 / (alpha - low) ** 2 + mua
            f_beta = p0 / (upp - beta) ** 2 - q0 / (beta - low) ** 2 + mua
            y = np.where(f_alpha >= 0.0, alpha, y)
            y = np.where(f_beta <= 0.0, beta, y)
            return y

        def residual(mu: float) -> float:
            return float(grad_con @ primal(mu)) - bound

        if residual(0.0) <= 0.0:
            mu = 0.0
        else:
            mu_hi = 1.0
            while residual(mu_hi) > 0.0:
                mu_hi *= 2.0
                if mu_hi > 1e14:
                    worst = float(grad_con @ alpha) - bound
                    raise StepError(
                        "volume constraint infeasible within move limits "
                        f"(constraint value {con_value:.3e}, best residual {worst:.3e})"
                    )
            mu = float(brentq(residual, mu_hi / 2.0 if mu_hi > 1.0 else 0.0, mu_hi,
                              xtol=1e-14, rtol=8.9e-16, maxiter=200))

        x_new = primal(mu)
        self.x_prev2 = self.x_prev1
        self.x_prev1 = x.copy()
        return x_new


def mma_step(
    rho_design: np.ndarray,
    grad_obj: np.ndarray,
    grad_con: np.ndarray,
    con_value: float,
    move_limit: float = 0.2,
) -> np.ndarray:
    """Single stateless update (fresh symmetric asymptotes)."""
    updater = MmaUpdater(n=rho_design.size, move_limit=move_limit)
    return updater.step(np.asarray(rho_design, dtype=float), grad_obj, grad_con, con_value)


def run(config: RunConfig, mesh: Mesh | None = None) -> RunResult:
    """Execute one optimization run: filter, evaluate, gradient, update.

    Deterministic per (config, seed). The recorded volume fraction is the
    mean physical density over design elements; the final field is the
    filtered physical one.
    """
    t0 = time.perf_counter()
    config.validate()
    if mesh is None:
        mesh = build_domain(config.domain)
    material = config.material
    kernel = FilterKernel.build(mesh, config.filter_radius)
    params = build_objective(mesh, config)

    x = init_density(config, mesh).design_values(mesh)
    vol_grad = kernel.volume_gradient() / config.volume_fraction
    updater = MmaUpdater(n=x.size, move_limit=config.move_limit)

    rho = physical_field(mesh, kernel, x)
    breakdown, cache = evaluate_objective(mesh, rho, material, params)
    vol = float(rho.design_values(mesh).mean())
    history = [HistoryRow(0, breakdown.total_phi, breakdown.mean_output_disp,
                          breakdown.total_strain_energy, vol, 0.0)]
    # Scale the objective by its starting term magnitudes so the asymptote
    # constants behave the same across mesh sizes and load magnitudes.
    phi_scale = max(sum(abs(a) + abs(b) for a, b in breakdown.per_case), 1e-12)

    converged = False
    for it in range(1, config.max_iters + 1):
        g_phys = gradient(mesh, rho, material, params, cache)
        g_design = chain_rule(kernel, g_phys[mesh.design_mask])
        con_value = vol / config.volume_fraction - 1.0
        x_new = updater.step(x, g_design / phi_scale, vol_grad, con_value)
        change = float(np.max(np.abs(x_new - x)))
        x = x_new

        rho = physical_field(mesh, kernel, x)
        breakdown, cache = evaluate_objective(mesh, rho, material, params)
        vol = float(rho.design_values(mesh).mean())
        history.append(HistoryRow(it, breakdown.total_phi, breakdown.mean_output_disp,
                                  breakdown.total_strain_energy, vol, change))
        if change < config.convergence_tol:
            converged = True
            break

    logger.info(
        "run done: %s V_f=%.3g seed=%d iters=%d phi=%.6g converged=%s",
        config.formulation, config.volume_fraction, config.seed,
        len(history) - 1, history[-1].phi, converged,
    )
    return RunResult(
        config=config,
        history=history,
        final_rho=rho,
        converged=converged,
        wall_time=time.perf_counter() - t0,
    )


def with_sweep_value(config: RunConfig, value: float, seed: int) -> RunConfig:
    """Template substitution used by campaigns."""
    if config.formulation == ACTIVE:
        return replace(config, input_displacement=float(value), seed=int(seed))
    return replace(config, volume_fraction=float(value), seed=int(seed))
