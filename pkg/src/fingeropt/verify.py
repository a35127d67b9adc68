"""Finalist verification: binarization plus linear grasp-proxy metrics.

The checks here approximate the nonlinear pre-loaded tests with linear FEM:
superposition removes any load-order dependence, so each metric is a single
linear solve on the binarized design. Every report states this approximation
and the mesh size, because peak stresses are mesh-sensitive.

Metrics:
  * tip stiffness: 1 N in +x at the tip face over the mean tip x-displacement
  * shape adaptivity: with 1 N at the mid contact face, the relative
    difference between the face and tip x-displacements; positive means the
    middle yields more than the tip (conforming), negative a lever-like
    sweep, above one an opposite-moving tip
  * maximum von Mises stress over solid elements (tip load and, for active
    designs, the prescribed stroke)
  * an actuation reaction-force proxy for active designs, reported under its
    own name because it is not a contact force
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .domain import Mesh, NodeSelector, make_selector
from .fem import (
    FORCE,
    PRESCRIBED,
    DensityField,
    LoadCase,
    MaterialParams,
    assemble,
    solve_case,
    von_mises,
)
from .optimizer import ACTIVE, PASSIVE

logger = logging.getLogger(__name__)

#: Adaptivity forcing face per formulation.
ADAPTIVITY_FACE = {PASSIVE: "F_in3", ACTIVE: "F_in2"}

VOID_THRESHOLD = 0.5


class VerificationError(RuntimeError):
    """Raised when a metric is requested on an invalid design."""


@dataclass
class BinarizeInfo:
    n_solid_design: int
    volume_fraction_binary: float
    removed_islands: int
    valid: bool


@dataclass
class Design:
    """A binarized candidate bound to its mesh and formulation context."""

    design_id: str
    mesh: Mesh
    rho: DensityField
    formulation: str
    input_displacement: float | None = None
    info: BinarizeInfo | None = None

    @property
    def valid(self) -> bool:
        return self.info is None or self.info.valid

    def support_dofs(self) -> np.ndarray | None:
        if self.formulation == ACTIVE:
            return self.mesh.front_slot_dofs
        return None  # mesh default: both slots


def select_solid(design_vals: np.ndarray, target_volume: float) -> np.ndarray:
    """Solid mask whose count matches the target volume within half an element.

    The densest elements win; exact density ties are broken by element index,
    so the selection is a deterministic threshold.
    """
    n = design_vals.size
    k = int(np.rint(target_volume))
    k = max(0, min(n, k))
    order = np.lexsort((np.arange(n), -design_vals))
    solid = np.zeros(n, dtype=bool)
    solid[order[:k]] = True
    return solid


def binarize(mesh: Mesh, rho: DensityField | np.ndarray,
             target_vf: float | None = None) -> tuple[DensityField, BinarizeInfo]:
    """Threshold to 0/1 at matched volume, keeping only support-connected material.

    The threshold matches the continuous volume (or ``target_vf`` when
    given) within half an element. Solid material not connected to the
    support slots is removed; non-design elements stay solid. The design is
    flagged invalid when no load path reaches the output face.
    """
    values = rho.values if isinstance(rho, DensityField) else np.asarray(rho, dtype=float)
    design_vals = values[mesh.design_mask]
    n_design = design_vals.size
    if target_vf is None:
        target = float(design_vals.sum())
    else:
        target = float(target_vf) * n_design
    solid_design = select_solid(design_vals, target)

    bin_active = np.ones(mesh.n_active)
    bin_active[mesh.design_mask] = solid_design.astype(float)

    kept_active, valid = _support_connected(mesh, bin_active)
    kept_design = kept_active[mesh.design_mask] > 0.5
    info = BinarizeInfo(
        n_solid_design=int(kept_design.sum()),
        volume_fraction_binary=float(kept_design.mean()) if n_design else 0.0,
        removed_islands=int(solid_design.sum() - kept_design.sum()),
        valid=valid,
    )
    return DensityField(kept_active), info


def _support_connected(mesh: Mesh, bin_active: np.ndarray) -> tuple[np.ndarray, bool]:
    """Keep solid cells 4-connected to the support slots."""
    raster = np.zeros(mesh.ny * mesh.nx, dtype=bool)
    raster[mesh.active_ids] = bin_active > 0.5
    grid = raster.reshape(mesh.ny, mesh.nx)
    labels, _ = ndimage.label(grid, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))

    support_cells = _support_element_ids(mesh)
    support_labels = np.unique(labels.ravel()[support_cells])
    support_labels = support_labels[support_labels > 0]
    keep = np.isin(labels.ravel(), support_labels) & raster

    kept_active = keep[mesh.active_ids].astype(float)
    # Non-design stays solid even if an input strip ends up isolated.
    kept_active[~mesh.design_mask] = 1.0

    output_cells = _face_strip_ids(mesh, "output")
    valid = bool(np.isin(labels.ravel()[output_cells], support_labels).any())
    return kept_active, valid


def _support_element_ids(mesh: Mesh) -> np.ndarray:
    """Grid cells whose nodes include support nodes (the slot elements)."""
    in_support = np.zeros(mesh.n_nodes, dtype=bool)
    in_support[mesh.support_nodes] = True
    hits = in_support[mesh.elements].all(axis=1)
    return np.flatnonzero(hits)


def _face_strip_ids(mesh: Mesh, label: str) -> np.ndarray:
    sel = make_selector(mesh, label)
    rows = np.unique(sel.nodes // (mesh.nx + 1))
    rows = rows[rows < mesh.ny]
    return rows * mesh.nx  # column 0 elements along the grasping edge


def _solve_force_at(design: Design, material: MaterialParams, face: str,
                    output: NodeSelector | None = None):
    mesh = design.mesh
    sel = make_selector(mesh, face)
    out = output if output is not None else sel
    extra = None
    if design.formulation == ACTIVE:
        act = make_selector(mesh, "actuation")
        extra = np.concatenate([2 * act.nodes, 2 * act.nodes + 1])
    system = assemble(mesh, design.rho, material,
                      extra_fixed_dofs=extra, support_dofs=design.support_dofs())
    case = LoadCase(FORCE, sel, 1.0, (1.0, 0.0), f"verify:{face}")
    return system, solve_case(system, case, out)


def tip_stiffness(design: Design, material: MaterialParams) -> float:
    """1 N at the tip face in x over the resulting mean tip x-displacement (N/mm)."""
    if not design.valid:
        raise VerificationError(
            f"design {design.design_id} has no load path from supports to the tip"
        )
    tip = make_selector(design.mesh, "output")
    _, res = _solve_force_at(design, material, "output", output=tip)
    if res.output_disp <= 0:
        raise VerificationError("non-positive tip displacement under tip load")
    return 1.0 / res.output_disp


def adaptivity(design: Design, material: MaterialParams) -> float | None:
    """Relative change in x-displacement between the forcing face and the tip.

    Returns None (undefined) when the face displacement is below 1e-9 mm.
    """
    if not design.valid:
        raise VerificationError(
            f"design {design.design_id} has no load path from supports to the tip"
        )
    mesh = design.mesh
    face = ADAPTIVITY_FACE[design.formulation]
    face_sel = make_selector(mesh, face)
    tip_sel = make_selector(mesh, "output")
    _, res = _solve_force_at(design, material, face, output=face_sel)
    delta_mid = res.output_disp
    delta_tip = tip_sel.apply(res.u)
    if abs(delta_mid) < 1e-9:
        return None
    return (delta_mid - delta_tip) / abs(delta_mid)


@dataclass
class VerificationReport:
    """Grasp-proxy metrics for one binarized design.

    ``notes`` records the linear-superposition approximation and the mesh
    size; ``errors`` lists failed sub-metrics on partial reports.
    """

    design_id: str
    valid: bool
    tip_stiffness: float | None
    adaptivity: float | None
    max_von_mises: float | None
    tip_free_disp: float | None
    actuation_reaction: float | None
    volume_fraction_binary: float
    mesh_grid: tuple[int, int]
    element_size: float
    notes: str
    errors: dict[str, str]

    @property
    def partial(self) -> bool:
        return bool(self.errors)

    def to_dict(self) -> dict:
        return {
            "design_id": self.design_id,
            "valid": self.valid,
            "tip_stiffness_N_per_mm": self.tip_stiffness,
            "adaptivity": self.adaptivity,
            "max_von_mises_MPa": self.max_von_mises,
            "tip_free_disp_mm": self.tip_free_disp,
            "actuation_reaction_N": self.actuation_reaction,
            "volume_fraction_binary": self.volume_fraction_binary,
            "mesh_grid": list(self.mesh_grid),
            "element_size_mm": self.element_size,
            "notes": self.notes,
            "errors": self.errors,
        }


_NOTES = ("linear FEM, superposition in place of the sequenced nonlinear pre-load; "
          "the actuation reaction is a proxy, not a contact force; "
          "peak stress is mesh-sensitive")


def verify_design(design: Design, material: MaterialParams) -> VerificationReport:
    """All metrics for one design; sub-metric failures leave a partial report."""
    mesh = design.mesh
    errors: dict[str, str] = {}
    stiffness = adapt = max_vm = free_disp = reaction = None

    def attempt(name: str, fn):
        nonlocal errors
        try:
            return fn()
        except (VerificationError, RuntimeError) as exc:
            errors[name] = str(exc)
            return None

    stiffness = attempt("tip_stiffness", lambda: tip_stiffness(design, material))
    adapt = attempt("adaptivity", lambda: adaptivity(design, material))

    def stresses():
        _, res = _solve_force_at(design, material, "output")
        vm, void = von_mises(mesh, design.rho, material, res.u, VOID_THRESHOLD)
        peak = float(vm[~void].max()) if (~void).any() else 0.0
        free = res.output_disp
        react = None
        if design.formulation == ACTIVE:
            act = make_selector(mesh, "actuation")
            extra = np.concatenate([2 * act.nodes, 2 * act.nodes + 1])
            system = assemble(mesh, design.rho, material, extra_fixed_dofs=extra,
                              support_dofs=design.support_dofs())
            case = LoadCase(PRESCRIBED, act, float(design.input_displacement),
                            (-1.0, 0.0), "verify:X_in")
            drive = solve_case(system, case, make_selector(mesh, "output"))
            vm2, void2 = von_mises(mesh, design.rho, material, drive.u, VOID_THRESHOLD)
            if (~void2).any():
                peak2 = float(vm2[~void2].max())
            else:
                peak2 = 0.0
            react_mask = np.isin(drive.reaction_dofs, 2 * act.nodes)
            react = float(np.sum(drive.reactions[react_mask]))
            return max(peak, peak2), drive.output_disp, react
        return peak, free, react

    if design.valid:
        got = attempt("stress_battery", stresses)
        if got is not None:
            max_vm, free_disp, reaction = got
    else:
        errors["validity"] = "no load path from supports to the output face"

    return VerificationReport(
        design_id=design.design_id,
        valid=design.valid and not errors,
        tip_stiffness=stiffness,
        adaptivity=adapt,
        max_von_mises=max_vm,
        tip_free_disp=free_disp,
        actuation_reaction=reaction,
        volume_fraction_binary=(design.info.volume_fraction_binary
                                if design.info else float(np.mean(
                                    design.rho.values[mesh.design_mask]))),
        mesh_grid=(mesh.nx, mesh.ny),
        element_size=mesh.element_size,
        notes=_NOTES,
        errors=errors,
    )


def save_report(run_dir: Path, report: VerificationReport) -> Path:
    path = Path(run_dir) / "report"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
