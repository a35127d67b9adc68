"""SIMP-interpolated 2D plane-stress linear elasticity on structured quad meshes.

Element stiffness uses the bilinear quadrilateral with 2x2 Gauss quadrature.
The global matrix carries the density interpolation
``E_eff = E_min + rho^p * (E0 - E_min)`` per element; supports and prescribed
DOFs are removed by partitioning and the reduced system is factorized once
and reused across load cases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

from .domain import Mesh, NodeSelector

logger = logging.getLogger(__name__)

FORCE = "force"
PRESCRIBED = "prescribed_displacement"


class FemError(RuntimeError):
    """Raised on invalid inputs or solver failures."""


class SingularSystemError(FemError):
    """Reduced stiffness matrix could not be factorized."""


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic plane-stress material with SIMP interpolation settings.

    Units: moduli in MPa (N/mm^2), thickness in mm. ``E_min`` is the void
    stiffness floor keeping the system positive definite; the default floor
    of 1e-4 * E0 also bounds hinge compliance so that converged mechanisms
    survive binarization (a 1e-6 floor lets the optimizer build void-bridge
    hinges that thresholding disconnects).
    """

    E0: float = 23.0
    E_min: float = 23.0e-4
    nu: float = 0.4
    penalty_p: float = 3.0
    thickness: float = 5.0

    def validate(self) -> None:
        if not 0 < self.E_min < 0.01 * self.E0:
            raise FemError("require 0 < E_min << E0")
        if not 0 < self.nu < 0.5:
            raise FemError("require 0 < nu < 0.5")
        if self.penalty_p < 1:
            raise FemError("require penalty_p >= 1")
        if self.thickness <= 0:
            raise FemError("require thickness > 0")

    def modulus(self, rho: np.ndarray) -> np.ndarray:
        """Effective modulus per element."""
        return self.E_min + np.power(rho, self.penalty_p) * (self.E0 - self.E_min)

    def modulus_gradient(self, rho: np.ndarray) -> np.ndarray:
        """d(modulus)/d(rho) per element."""
        return self.penalty_p * np.power(rho, self.penalty_p - 1.0) * (self.E0 - self.E_min)


@dataclass
class DensityField:
    """Per-active-element material densities in [0, 1], non-design pinned to 1."""

    values: np.ndarray

    @classmethod
    def uniform(cls, mesh: Mesh, value: float) -> "DensityField":
        rho = np.full(mesh.n_active, float(value))
        rho[~mesh.design_mask] = 1.0
        return cls(rho)

    @classmethod
    def from_design(cls, mesh: Mesh, design_values: np.ndarray) -> "DensityField":
        """Embed design-variable values; non-design elements go solid."""
        rho = np.ones(mesh.n_active)
        rho[mesh.design_mask] = design_values
        return cls(rho)

    def design_values(self, mesh: Mesh) -> np.ndarray:
        return self.values[mesh.design_mask]

    def validate(self, mesh: Mesh) -> None:
        if self.values.shape != (mesh.n_active,):
            raise FemError("density field does not match mesh")
        if np.any(self.values < -1e-12) or np.any(self.values > 1 + 1e-12):
            raise FemError("densities must lie in [0, 1]")
        if not np.all(self.values[~mesh.design_mask] == 1.0):
            raise FemError("non-design densities must equal 1")


@dataclass(frozen=True)
class LoadCase:
    """One loading condition: a face force or a prescribed displacement.

    ``magnitude`` is the total force in N (kind ``force``) or the displacement
    in mm (kind ``prescribed_displacement``); it is distributed over the
    selector nodes by their weights. ``direction`` is a unit 2-vector.
    """

    kind: str
    selector: NodeSelector
    magnitude: float
    direction: tuple[float, float]
    label: str = ""

    def validate(self) -> None:
        if self.kind not in (FORCE, PRESCRIBED):
            raise FemError(f"unknown load case kind {self.kind!r}")
        if self.magnitude < 0:
            raise FemError("load magnitude must be non-negative")
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise FemError("load direction must be a unit vector")


@dataclass
class SolveResult:
    """Displacement solution and derived scalars for one load case.

    ``strain_energy`` is u^T K u over the full system (N*mm); ``output_disp``
    is the output selector applied to u (mm). ``reactions`` holds forces at
    constrained DOFs (``reaction_dofs``), in N.
    """

    u: np.ndarray
    strain_energy: float
    output_disp: float
    reaction_dofs: np.ndarray
    reactions: np.ndarray
    case_label: str = ""


_GAUSS = 1.0 / np.sqrt(3.0)
_GAUSS_POINTS = [(-_GAUSS, -_GAUSS), (_GAUSS, -_GAUSS), (_GAUSS, _GAUSS), (-_GAUSS, _GAUSS)]


def _shape_gradients(xi: float, eta: float) -> np.ndarray:
    """d(N_i)/d(xi, eta) for the 4-node bilinear quad, CCW node order; (2, 4)."""
    return 0.25 * np.array(
        [
            [-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)],
            [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)],
        ]
    )


def plane_stress_c(nu: float) -> np.ndarray:
    """Constitutive matrix at unit modulus."""
    return (1.0 / (1.0 - nu * nu)) * np.array(
        [[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, (1.0 - nu) / 2.0]]
    )


def _b_matrix(dndx: np.ndarray) -> np.ndarray:
    b = np.zeros((3, 8))
    b[0, 0::2] = dndx[0]
    b[1, 1::2] = dndx[1]
    b[2, 0::2] = dndx[1]
    b[2, 1::2] = dndx[0]
    return b


def element_stiffness(material: MaterialParams, element_size: float = 1.0) -> np.ndarray:
    """Reference element stiffness at unit modulus, including thickness.

    For a square plane-stress quad the result is independent of the element
    size; the argument is kept for clarity at call sites.
    """
    material.validate()
    c = plane_stress_c(material.nu)
    h = element_size
    coords = np.array([[0.0, 0.0], [h, 0.0], [h, h], [0.0, h]])
    ke = np.zeros((8, 8))
    for xi, eta in _GAUSS_POINTS:
        dn = _shape_gradients(xi, eta)
        jac = dn @ coords
        det = np.linalg.det(jac)
        if det <= 0:
            raise FemError("non-positive element Jacobian")
        dndx = np.linalg.solve(jac, dn)
        b = _b_matrix(dndx)
        ke += (b.T @ c @ b) * det
    ke *= material.thickness
    return 0.5 * (ke + ke.T)


def centroid_b_matrix(element_size: float) -> np.ndarray:
    """Strain-displacement matrix at the element centroid."""
    dn = _shape_gradients(0.0, 0.0)
    coords = np.array([[0.0, 0.0], [element_size, 0.0],
                       [element_size, element_size], [0.0, element_size]])
    jac = dn @ coords
    dndx = np.linalg.solve(jac, dn)
    return _b_matrix(dndx)


@dataclass
class LinearSystem:
    """Assembled global system with a reusable reduced factorization.

    ``fixed_dofs`` collects supports, any extra constrained DOFs (for
    prescribed-displacement cases) and DOFs of nodes untouched by active
    elements. Only ``free_dofs`` enter the factorized operator.
    """

    mesh: Mesh
    material: MaterialParams
    K: "csc_matrix"
    e_mod: np.ndarray
    fixed_dofs: np.ndarray
    free_dofs: np.ndarray
    ke_ref: np.ndarray
    _lu: object = field(default=None, repr=False)
    _k_ff: object = field(default=None, repr=False)

    @property
    def k_ff(self):
        if self._k_ff is None:
            self._k_ff = self.K[self.free_dofs, :][:, self.free_dofs].tocsc()
        return self._k_ff

    @property
    def lu(self):
        if self._lu is None:
            try:
                self._lu = splu(self.k_ff)
            except RuntimeError as exc:
                diag = self.k_ff.diagonal()
                raise SingularSystemError(
                    "reduced stiffness matrix is singular "
                    f"(free dofs={self.free_dofs.size}, "
                    f"diag range=[{diag.min():.3e}, {diag.max():.3e}]); "
                    "check supports and density floor"
                ) from exc
        return self._lu

    def solve_free(self, rhs_free: np.ndarray) -> np.ndarray:
        """Direct solve plus iterative refinement against the E0/E_min contrast."""
        u = self.lu.solve(rhs_free)
        norm = np.linalg.norm(rhs_free)
        if norm == 0.0:
            return u
        for _ in range(2):
            resid = rhs_free - self.k_ff @ u
            if np.linalg.norm(resid) <= 1e-13 * norm:
                break
            u += self.lu.solve(resid)
        return u

    def solve_full(self, rhs: np.ndarray) -> np.ndarray:
        """Solve with zero values on fixed DOFs, returning a full-length vector."""
        u = np.zeros(self.mesh.dof_count)
        u[self.free_dofs] = self.solve_free(rhs[self.free_dofs])
        return u


def assemble(
    mesh: Mesh,
    rho: DensityField | np.ndarray,
    material: MaterialParams,
    extra_fixed_dofs: np.ndarray | None = None,
    support_dofs: np.ndarray | None = None,
) -> LinearSystem:
    """Assemble K(rho) and partition out supports and extra constrained DOFs.

    ``support_dofs`` defaults to the mesh supports (both slots); the active
    formulation passes the front slot only.
    """
    material.validate()
    values = rho.values if isinstance(rho, DensityField) else np.asarray(rho, dtype=float)
    if values.shape != (mesh.n_active,):
        raise FemError("density field does not match mesh")

    ke_ref = element_stiffness(material, mesh.element_size)
    e_mod = material.modulus(values)
    data = (e_mod[:, None, None] * ke_ref[None, :, :]).ravel()
    rows = np.repeat(mesh.edofs, 8, axis=1).ravel()
    cols = np.tile(mesh.edofs, (1, 8)).ravel()
    ndof = mesh.dof_count
    K = csc_matrix((data, (rows, cols)), shape=(ndof, ndof))

    if support_dofs is None:
        support_dofs = mesh.support_dofs
    fixed = np.zeros(ndof, dtype=bool)
    fixed[np.asarray(support_dofs, dtype=np.int64)] = True
    if extra_fixed_dofs is not None and len(extra_fixed_dofs):
        fixed[np.asarray(extra_fixed_dofs, dtype=np.int64)] = True
    fixed[~mesh.used_dof_mask] = True

    fixed_dofs = np.flatnonzero(fixed)
    free_dofs = np.flatnonzero(~fixed)
    if free_dofs.size == 0:
        raise FemError("no free DOFs: the whole mesh is constrained")
    if len(support_dofs) == 0:
        raise SingularSystemError("no supports defined: rigid-body modes present")

    return LinearSystem(
        mesh=mesh,
        material=material,
        K=K,
        e_mod=e_mod,
        fixed_dofs=fixed_dofs,
        free_dofs=free_dofs,
        ke_ref=ke_ref,
    )


def load_vector(case: LoadCase, ndof: int) -> np.ndarray:
    """Consistent nodal force vector for a force-type load case."""
    f = np.zeros(ndof)
    sel = case.selector
    f[2 * sel.nodes] += case.magnitude * case.direction[0] * sel.weights
    f[2 * sel.nodes + 1] += case.magnitude * case.direction[1] * sel.weights
    return f


def prescribed_values(case: LoadCase, ndof: int) -> tuple[np.ndarray, np.ndarray]:
    """(dofs, values) prescribed by a displacement-type load case (both axes)."""
    sel = case.selector
    dofs = np.concatenate([2 * sel.nodes, 2 * sel.nodes + 1])
    vals = np.concatenate(
        [
            np.full(sel.nodes.size, case.magnitude * case.direction[0]),
            np.full(sel.nodes.size, case.magnitude * case.direction[1]),
        ]
    )
    return dofs, vals


def solve_case(system: LinearSystem, case: LoadCase, output: NodeSelector) -> SolveResult:
    """Solve one load case against an assembled system.

    Prescribed-displacement cases require the case DOFs to be among the
    system's fixed set (assemble with ``extra_fixed_dofs``); the equivalent
    load on free DOFs is -K_fp u_p.
    """
    case.validate()
    ndof = system.mesh.dof_count
    free = system.free_dofs
    u = np.zeros(ndof)
    f_applied = np.zeros(ndof)

    if case.kind == FORCE:
        f_applied = load_vector(case, ndof)
        rhs = f_applied[free]
        if np.any(f_applied[system.fixed_dofs] != 0.0):
            logger.warning("force case %s loads constrained DOFs; those components "
                           "are carried by the reactions", case.label)
        u[free] = system.solve_free(rhs)
        _check_residual(system, u, f_applied)
    else:
        dofs, vals = prescribed_values(case, ndof)
        fixed_set = np.zeros(ndof, dtype=bool)
        fixed_set[system.fixed_dofs] = True
        if not fixed_set[dofs].all():
            raise FemError(
                f"prescribed case {case.label!r} targets unconstrained DOFs; "
                "assemble the system with these DOFs in extra_fixed_dofs"
            )
        u[dofs] = vals
        rhs = -(system.K @ u)[free]
        u[free] = system.solve_free(rhs)

    ku = system.K @ u
    strain_energy = float(u @ ku)
    reactions = ku - f_applied
    return SolveResult(
        u=u,
        strain_energy=strain_energy,
        output_disp=output.apply(u),
        reaction_dofs=system.fixed_dofs,
        reactions=reactions[system.fixed_dofs],
        case_label=case.label,
    )


def _check_residual(system: LinearSystem, u: np.ndarray, f: np.ndarray) -> None:
    free = system.free_dofs
    fnorm = np.linalg.norm(f[free])
    if fnorm == 0.0:
        return
    rnorm = np.linalg.norm((system.K @ u)[free] - f[free])
    if rnorm <= 1e-10 * fnorm:
        return
    # High E0/E_min contrast can push ||K|| ||u|| / ||f|| past 1e10, where a
    # backward-stable solve still measures above 1e-10; accept those.
    scale = np.linalg.norm((abs(system.K) @ np.abs(u))[free]) + fnorm
    backward = rnorm / scale
    if backward > 1e-13:
        raise FemError(
            f"linear solve residual {rnorm / fnorm:.3e} (backward error "
            f"{backward:.3e}) exceeds tolerance; system may be near singular"
        )


def strain_energy_per_element(system: LinearSystem, u: np.ndarray) -> np.ndarray:
    """u_e^T K_e u_e per active element (N*mm)."""
    ue = u[system.mesh.edofs]
    core = np.einsum("ei,ij,ej->e", ue, system.ke_ref, ue)
    return system.e_mod * core


def von_mises(
    mesh: Mesh,
    rho: DensityField | np.ndarray,
    material: MaterialParams,
    u: np.ndarray,
    void_threshold: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Element-centroid von Mises stress (MPa) and a void flag per element.

    Stresses use each element's interpolated modulus; flagged void elements
    (rho < threshold) carry no meaningful stress.
    """
    values = rho.values if isinstance(rho, DensityField) else np.asarray(rho, dtype=float)
    b = centroid_b_matrix(mesh.element_size)
    c = plane_stress_c(material.nu)
    cb = c @ b
    ue = u[mesh.edofs]
    sig = material.modulus(values)[:, None] * (ue @ cb.T)
    sx, sy, txy = sig[:, 0], sig[:, 1], sig[:, 2]
    vm = np.sqrt(np.maximum(sx * sx - sx * sy + sy * sy + 3.0 * txy * txy, 0.0))
    return vm, values < void_threshold
