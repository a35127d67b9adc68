"""Objective evaluation and adjoint gradients for the two-term cost function.

The objective sums, over the configured load cases, a weighted output
displacement term and the strain energy:

    phi(rho) = sum_n ( w * L u_n + E_n ),    E_n = u_n^T K u_n

Gradients use the adjoint method. For a fixed-force case, both terms reduce
to element products with the single adjoint solve K lambda = L:

    d(L u)/d(rho_e) = -lambda_e^T dK_e u_e
    d(u^T K u)/d(rho_e) = -u_e^T dK_e u_e

For a prescribed-displacement case with no applied forces on free DOFs the
energy term flips sign (+u_e^T dK_e u_e) because the motion is imposed, and
the output adjoint uses the same partitioned operator with the full
displacement vector (which carries the K_fp u_p dependence).

A density filter regularizes the design: physical densities are a
neighborhood average of design densities with linear-decay weights. The
filter acts on design elements only; non-design solids stay pinned at 1 and
do not bleed into their neighbors, which keeps a uniform field (and its
volume) exactly invariant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix, identity

from .domain import Mesh, NodeSelector
from .fem import (
    FORCE,
    PRESCRIBED,
    DensityField,
    FemError,
    LinearSystem,
    LoadCase,
    MaterialParams,
    assemble,
    prescribed_values,
    solve_case,
)

logger = logging.getLogger(__name__)


class GradientCacheError(RuntimeError):
    """Raised when gradient() is called without matching cached solves."""


@dataclass(frozen=True)
class ObjectiveParams:
    """Weight, load cases, output selector and supports defining the problem.

    ``support_dofs`` of None uses the mesh default (both slots fixed); the
    active formulation fixes the front slot only, leaving the driven arm free
    to follow the actuation face.
    """

    w: float
    load_cases: tuple[LoadCase, ...]
    output: NodeSelector
    support_dofs: np.ndarray | None = None

    def validate(self) -> None:
        if self.w <= 0:
            raise FemError("objective weight must be positive")
        if not self.load_cases:
            raise FemError("at least one load case is required")
        for case in self.load_cases:
            case.validate()


@dataclass
class ObjectiveBreakdown:
    """Per-case terms and the aggregates used for reporting and plotting."""

    per_case: list[tuple[float, float]]  # (w * L u_n, E_n)
    total_phi: float
    mean_output_disp: float
    total_strain_energy: float


@dataclass
class SolveCache:
    """Solves of one objective evaluation, reused by gradient()."""

    system: LinearSystem
    results: list
    rho: np.ndarray
    params: ObjectiveParams


def constrained_case_dofs(params: ObjectiveParams, ndof: int) -> np.ndarray:
    """DOFs held by prescribed-displacement cases (constrained in all solves)."""
    dofs = [np.empty(0, dtype=np.int64)]
    for case in params.load_cases:
        if case.kind == PRESCRIBED:
            d, _ = prescribed_values(case, ndof)
            dofs.append(d)
    return np.unique(np.concatenate(dofs))


def evaluate_objective(
    mesh: Mesh,
    rho: DensityField | np.ndarray,
    material: MaterialParams,
    params: ObjectiveParams,
) -> tuple[ObjectiveBreakdown, SolveCache]:
    """One assembly and factorization, n solves; returns breakdown and cache.

    ``rho`` must already be the physical (filtered) field.
    """
    params.validate()
    values = rho.values if isinstance(rho, DensityField) else np.asarray(rho, dtype=float)
    system = assemble(
        mesh, values, material,
        extra_fixed_dofs=constrained_case_dofs(params, mesh.dof_count),
        support_dofs=params.support_dofs,
    )
    results = [solve_case(system, case, params.output) for case in params.load_cases]

    per_case = [(params.w * r.output_disp, r.strain_energy) for r in results]
    n = len(results)
    breakdown = ObjectiveBreakdown(
        per_case=per_case,
        total_phi=float(sum(a + b for a, b in per_case)),
        mean_output_disp=float(sum(r.output_disp for r in results) / n),
        total_strain_energy=float(sum(r.strain_energy for r in results)),
    )
    cache = SolveCache(system=system, results=results, rho=values.copy(), params=params)
    return breakdown, cache


def gradient(
    mesh: Mesh,
    rho: DensityField | np.ndarray,
    material: MaterialParams,
    params: ObjectiveParams,
    cache: SolveCache,
) -> np.ndarray:
    """d(phi)/d(rho) per active element at the physical densities.

    Requires the cache from evaluate_objective on the same field; never
    re-solves silently. Non-design entries are reported as zero (pinned).
    """
    values = rho.values if isinstance(rho, DensityField) else np.asarray(rho, dtype=float)
    if cache is None:
        raise GradientCacheError("gradient requires cached solves from evaluate_objective")
    if cache.params is not params or not np.array_equal(cache.rho, values):
        raise GradientCacheError("cached solves do not match this density field")

    system = cache.system
    dmod = material.modulus_gradient(values)
    edofs = system.mesh.edofs
    ke = system.ke_ref

    # Shared adjoint: K lambda = L (same reduced operator for every case).
    lam = system.solve_full(params.output.as_vector(mesh.dof_count))
    lam_e = lam[edofs]

    g = np.zeros(mesh.n_active)
    for case, res in zip(params.load_cases, cache.results):
        ue = res.u[edofs]
        out_term = np.einsum("ei,ij,ej->e", lam_e, ke, ue)
        en_term = np.einsum("ei,ij,ej->e", ue, ke, ue)
        if case.kind == FORCE:
            g += dmod * (-params.w * out_term - en_term)
        else:
            g += dmod * (-params.w * out_term + en_term)

    g[~mesh.design_mask] = 0.0
    return g


@dataclass
class FilterKernel:
    """Linear-decay density filter over design elements.

    ``H`` is row-stochastic: physical design densities are H @ design
    densities. The transpose is the gradient chain rule.
    """

    radius: float
    H: "csr_matrix"
    design_ids: np.ndarray  # active-element indices of design elements

    @classmethod
    def build(cls, mesh: Mesh, radius: float = 2.0) -> "FilterKernel":
        """Kernel with weights max(0, radius - distance), distances in elements."""
        design_ids = np.flatnonzero(mesh.design_mask)
        n = design_ids.size
        if radius < 1.0:
            logger.warning("filter radius %.3g < 1 element: filter is the identity", radius)
            return cls(radius=radius, H=identity(n, format="csr"), design_ids=design_ids)

        coords = mesh.active_grid_coords()[design_ids]
        index = np.full((mesh.ny, mesh.nx), -1, dtype=np.int64)
        index[coords[:, 1], coords[:, 0]] = np.arange(n)

        reach = int(np.ceil(radius)) + 1
        rows, cols, vals = [], [], []
        for dy in range(-reach, reach + 1):
            for dx in range(-reach, reach + 1):
                dist = np.hypot(dx, dy)
                wgt = radius - dist
                if wgt <= 0:
                    continue
                cc = coords[:, 0] + dx
                rr = coords[:, 1] + dy
                ok = (cc >= 0) & (cc < mesh.nx) & (rr >= 0) & (rr < mesh.ny)
                neighbor = np.full(n, -1, dtype=np.int64)
                neighbor[ok] = index[rr[ok], cc[ok]]
                hit = neighbor >= 0
                rows.append(np.flatnonzero(hit))
                cols.append(neighbor[hit])
                vals.append(np.full(int(hit.sum()), wgt))
        H = csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )
        norm = np.asarray(H.sum(axis=1)).ravel()
        H = csr_matrix(H.multiply(1.0 / norm[:, None]))
        return cls(radius=radius, H=H, design_ids=design_ids)

    @property
    def n_design(self) -> int:
        return self.design_ids.size

    def volume_gradient(self) -> np.ndarray:
        """d(mean physical design density)/d(design variables): H^T 1 / n."""
        return np.asarray(self.H.sum(axis=0)).ravel() / self.n_design


def apply_filter(kernel: FilterKernel, rho_design: np.ndarray) -> np.ndarray:
    """Physical densities of the design elements (neighborhood average)."""
    rho_design = np.asarray(rho_design, dtype=float)
    if rho_design.shape != (kernel.n_design,):
        raise FemError("design field does not match filter kernel")
    return kernel.H @ rho_design


def chain_rule(kernel: FilterKernel, dphi_dphysical: np.ndarray) -> np.ndarray:
    """Pull a physical-density gradient back to design variables (H^T g)."""
    dphi_dphysical = np.asarray(dphi_dphysical, dtype=float)
    if dphi_dphysical.shape != (kernel.n_design,):
        raise FemError("gradient field does not match filter kernel")
    return kernel.H.T @ dphi_dphysical


def physical_field(mesh: Mesh, kernel: FilterKernel, rho_design: np.ndarray) -> DensityField:
    """Filtered design variables embedded into the full active field."""
    return DensityField.from_design(mesh, apply_filter(kernel, rho_design))
