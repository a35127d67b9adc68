"""Tapered finger design domain: structured quad mesh, masks and node selectors.

The domain is a trapezoid in the x-y plane: the grasping (contact) edge is the
straight vertical edge at x = 0, the outer edge tapers from ``width_top`` at
y = ``height`` down to ``width_bottom`` at y = 0 (the tip). The mesh is a
regular grid of square elements over the bounding box; an element is active
when its centroid lies inside the trapezoid (staircase boundary).

Conventions:
  * node index = row * (nx + 1) + col, row-major from the bottom-left origin
  * element index = row * nx + col over the full bounding grid
  * element nodes are listed counter-clockwise from the bottom-left corner
  * DOFs are interleaved: node n owns DOFs (2n, 2n + 1) = (x, y)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: Number of force input faces along the grasping edge, tip to base.
NUM_INPUT_FACES = 6

#: Fraction of the grasping edge (from the tip) covered by the input-face span.
FACE_SPAN_FRACTION = 0.78

MIN_ACTIVE_ELEMENTS = 100


class DomainError(ValueError):
    """Raised for invalid domain specifications."""


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in domain coordinates (mm)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, x: float | np.ndarray, y: float | np.ndarray):
        return (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)


@dataclass(frozen=True)
class EdgeSegment:
    """Segment of a domain edge, identified by the edge it sits on.

    ``edge`` is one of ``grasping`` (x = 0, span in y) or ``top`` (y = height,
    span in x); ``lo``/``hi`` bound the span along the edge in mm.
    """

    edge: str
    lo: float
    hi: float

    def length(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class DomainSpec:
    """Geometry of the tapered finger design domain.

    All lengths in mm. ``input_faces`` are ordered tip (F_in1) to base
    (F_in6) on the grasping edge. ``slot_regions`` are the two upper mounting
    slots (non-design, supports). ``actuation_face`` is where the input
    displacement is prescribed in the active formulation.
    """

    height: float
    width_top: float
    width_bottom: float
    element_size: float
    slot_regions: tuple[Rect, Rect]
    input_faces: tuple[EdgeSegment, ...]
    output_face: EdgeSegment
    actuation_face: EdgeSegment

    @classmethod
    def create(
        cls,
        height: float = 100.0,
        width_top: float = 40.0,
        width_bottom: float = 15.0,
        element_size: float = 1.25,
        slot_size: float = 8.0,
        slot_inset: float = 4.0,
        slot_top_offset: float = 8.0,
        face_span_fraction: float = FACE_SPAN_FRACTION,
        actuation_x0_fraction: float = 0.60,
        actuation_x1_fraction: float = 0.90,
    ) -> "DomainSpec":
        """Build a spec with derived face and slot placements.

        The input faces are six equal segments with equal gaps covering
        ``face_span_fraction`` of the grasping edge from the tip; the output
        face coincides with the tip face. Slots are two squares below the top
        edge, one near each side.
        """
        span = face_span_fraction * height
        pitch = span / (2 * NUM_INPUT_FACES - 1)
        faces = tuple(
            EdgeSegment("grasping", 2 * k * pitch, (2 * k + 1) * pitch)
            for k in range(NUM_INPUT_FACES)
        )
        y1 = height - slot_top_offset
        y0 = y1 - slot_size
        slots = (
            Rect(slot_inset, y0, slot_inset + slot_size, y1),
            Rect(width_top - slot_inset - slot_size, y0, width_top - slot_inset, y1),
        )
        actuation = EdgeSegment(
            "top", actuation_x0_fraction * width_top, actuation_x1_fraction * width_top
        )
        return cls(
            height=height,
            width_top=width_top,
            width_bottom=width_bottom,
            element_size=element_size,
            slot_regions=slots,
            input_faces=faces,
            output_face=faces[0],
            actuation_face=actuation,
        )

    def width_at(self, y: float | np.ndarray):
        """Local trapezoid width, linear in y."""
        return self.width_bottom + (self.width_top - self.width_bottom) * (
            np.asarray(y) / self.height
        )

    def validate(self) -> None:
        h = self.element_size
        if h <= 0:
            raise DomainError("element_size must be positive")
        if not self.width_bottom < self.width_top:
            raise DomainError(
                "domain must taper: width_bottom must be strictly less than width_top"
            )
        if min(self.width_top, self.width_bottom) < 4 * h:
            raise DomainError("widths must be at least 4 elements wide")
        ny = self.height / h
        if abs(ny - round(ny)) > 1e-9:
            raise DomainError("element_size must divide height exactly")
        if len(self.input_faces) != NUM_INPUT_FACES:
            raise DomainError(f"expected {NUM_INPUT_FACES} input faces")
        prev_hi = -np.inf
        for seg in self.input_faces:
            if seg.edge != "grasping":
                raise DomainError("input faces must lie on the grasping edge")
            if seg.length() <= 0:
                raise DomainError("input faces must have positive length")
            if seg.lo < prev_hi - 1e-12:
                raise DomainError("input faces must be disjoint and ordered tip to base")
            prev_hi = seg.hi
        if self.input_faces[-1].hi > self.height + 1e-9:
            raise DomainError("input faces must lie within the grasping edge")
        if self.output_face.edge != "grasping":
            raise DomainError("output face must lie on the grasping edge")
        if self.actuation_face.edge != "top":
            raise DomainError("actuation face must lie on the top edge")


@dataclass(frozen=True, eq=False)
class NodeSelector:
    """Weighted node set picking one displacement component per node.

    Applying the selector to a global displacement vector returns the
    weighted mean of the selected component; weights sum to one.
    """

    label: str
    nodes: np.ndarray
    dof_axis: str  # "x" or "y"
    weights: np.ndarray

    @classmethod
    def uniform(cls, label: str, nodes: np.ndarray, dof_axis: str = "x") -> "NodeSelector":
        nodes = np.sort(np.asarray(nodes, dtype=np.int64))
        if nodes.size == 0:
            raise DomainError(f"selector {label!r} matches no nodes")
        w = np.full(nodes.size, 1.0 / nodes.size)
        return cls(label=label, nodes=nodes, dof_axis=dof_axis, weights=w)

    @property
    def dofs(self) -> np.ndarray:
        off = 0 if self.dof_axis == "x" else 1
        return 2 * self.nodes + off

    def apply(self, u: np.ndarray) -> float:
        return float(self.weights @ u[self.dofs])

    def as_vector(self, ndof: int) -> np.ndarray:
        """Dense selection vector L with L @ u == self.apply(u)."""
        vec = np.zeros(ndof)
        vec[self.dofs] = self.weights
        return vec


@dataclass(eq=False)
class Mesh:
    """Structured quad mesh with activity and non-design masks.

    Arrays cover the full bounding grid; ``active_ids`` maps the compact
    per-active-element ordering used by density fields back to grid cells.
    Immutable after construction.
    """

    spec: DomainSpec | None
    nx: int
    ny: int
    element_size: float
    nodes: np.ndarray          # (n_nodes, 2) coordinates, mm
    elements: np.ndarray       # (n_cells, 4) CCW node indices
    active_mask: np.ndarray    # (n_cells,) bool
    nondesign_mask: np.ndarray  # (n_cells,) bool, subset of active
    support_nodes: np.ndarray  # fixed nodes (both slots)
    slot_nodes: tuple[np.ndarray, ...] = ()  # per-slot node sets (front, back)

    active_ids: np.ndarray = field(init=False)
    design_mask: np.ndarray = field(init=False)   # over active elements
    edofs: np.ndarray = field(init=False)         # (n_active, 8) DOF map
    used_dof_mask: np.ndarray = field(init=False)  # DOFs touched by active elements

    def __post_init__(self) -> None:
        self.active_ids = np.flatnonzero(self.active_mask)
        self.design_mask = ~self.nondesign_mask[self.active_ids]
        conn = self.elements[self.active_ids]
        self.edofs = np.empty((conn.shape[0], 8), dtype=np.int64)
        self.edofs[:, 0::2] = 2 * conn
        self.edofs[:, 1::2] = 2 * conn + 1
        self.used_dof_mask = np.zeros(self.dof_count, dtype=bool)
        self.used_dof_mask[self.edofs.ravel()] = True

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def dof_count(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_active(self) -> int:
        return self.active_ids.size

    @property
    def n_design(self) -> int:
        return int(self.design_mask.sum())

    @property
    def support_dofs(self) -> np.ndarray:
        return np.sort(np.concatenate([2 * self.support_nodes, 2 * self.support_nodes + 1]))

    @property
    def front_slot_dofs(self) -> np.ndarray:
        """DOFs of the slot nearest the grasping edge (the stationary mount)."""
        if not self.slot_nodes:
            return self.support_dofs
        nodes = self.slot_nodes[0]
        return np.sort(np.concatenate([2 * nodes, 2 * nodes + 1]))

    def node_index(self, col: int, row: int) -> int:
        return row * (self.nx + 1) + col

    def element_centroids(self) -> np.ndarray:
        """Centroids of all grid cells, (n_cells, 2)."""
        h = self.element_size
        cols = np.arange(self.nx)
        rows = np.arange(self.ny)
        cc, rr = np.meshgrid(cols, rows)
        return np.column_stack(((cc.ravel() + 0.5) * h, (rr.ravel() + 0.5) * h))

    def active_grid_coords(self) -> np.ndarray:
        """(col, row) integer grid coordinates of active elements, (n_active, 2)."""
        return np.column_stack((self.active_ids % self.nx, self.active_ids // self.nx))

    def signature(self) -> tuple:
        """Cheap identity for compatibility checks between runs."""
        return (self.nx, self.ny, float(self.element_size), int(self.n_active),
                int(self.nondesign_mask.sum()))

    def boundary_node_mask(self) -> np.ndarray:
        """Nodes on the boundary of the active region.

        A node is on the boundary when it is used by at least one active
        element but not surrounded by four active elements.
        """
        count = np.zeros(self.n_nodes, dtype=np.int64)
        for k in range(4):
            np.add.at(count, self.elements[self.active_ids, k], 1)
        return (count > 0) & (count < 4)

    def to_text(self) -> str:
        """Plain-text node/element listing for debugging."""
        lines = [f"# mesh {self.nx}x{self.ny} h={self.element_size:g} "
                 f"active={self.n_active} nondesign={int(self.nondesign_mask.sum())}"]
        lines.append("# nodes: id x y")
        for i, (x, y) in enumerate(self.nodes):
            lines.append(f"{i} {x:.6g} {y:.6g}")
        lines.append("# elements: id n1 n2 n3 n4 active nondesign")
        for e in range(self.elements.shape[0]):
            n = self.elements[e]
            lines.append(
                f"{e} {n[0]} {n[1]} {n[2]} {n[3]} "
                f"{int(self.active_mask[e])} {int(self.nondesign_mask[e])}"
            )
        return "\n".join(lines) + "\n"


def _grid_nodes(nx: int, ny: int, h: float) -> np.ndarray:
    cols = np.arange(nx + 1) * h
    rows = np.arange(ny + 1) * h
    xx, yy = np.meshgrid(cols, rows)
    return np.column_stack((xx.ravel(), yy.ravel()))


def _grid_elements(nx: int, ny: int) -> np.ndarray:
    cc, rr = np.meshgrid(np.arange(nx), np.arange(ny))
    cc = cc.ravel()
    rr = rr.ravel()
    n1 = rr * (nx + 1) + cc
    return np.column_stack((n1, n1 + 1, n1 + nx + 2, n1 + nx + 1))


def build_domain(spec: DomainSpec) -> Mesh:
    """Mesh the tapered domain and mark non-design regions.

    Raises DomainError when faces or slots fall outside the trapezoid or the
    mesh is too coarse (< 100 active elements).
    """
    spec.validate()
    h = spec.element_size
    ny = int(round(spec.height / h))
    nx = int(np.ceil(spec.width_top / h - 1e-9))

    nodes = _grid_nodes(nx, ny, h)
    elements = _grid_elements(nx, ny)
    centroids_x = (np.tile(np.arange(nx), ny) + 0.5) * h
    centroids_y = (np.repeat(np.arange(ny), nx) + 0.5) * h
    active = centroids_x <= spec.width_at(centroids_y) + 1e-12

    if int(active.sum()) < MIN_ACTIVE_ELEMENTS:
        raise DomainError(
            f"mesh too coarse: {int(active.sum())} active elements "
            f"(need >= {MIN_ACTIVE_ELEMENTS})"
        )

    nondesign = np.zeros_like(active)

    # Slot regions: every covered cell must be active, else the slot pokes
    # outside the trapezoid.
    for rect in spec.slot_regions:
        in_slot = rect.contains(centroids_x, centroids_y)
        if not in_slot.any():
            raise DomainError(f"slot {rect} covers no elements")
        if not active[in_slot].all():
            raise DomainError(f"slot {rect} falls outside the tapered domain")
        nondesign |= in_slot

    # One-element-deep solid strips behind each input face (first column).
    for seg in spec.input_faces:
        rows = _rows_overlapping(seg.lo, seg.hi, h, ny)
        if rows.size == 0:
            raise DomainError(f"input face {seg} covers no elements")
        ids = rows * nx  # column 0
        if not active[ids].all():
            raise DomainError(f"input face {seg} falls outside the tapered domain")
        nondesign[ids] = True

    slot_nodes = _slot_nodes(spec, elements, centroids_x, centroids_y)

    return Mesh(
        spec=spec,
        nx=nx,
        ny=ny,
        element_size=h,
        nodes=nodes,
        elements=elements,
        active_mask=active,
        nondesign_mask=nondesign,
        support_nodes=np.unique(np.concatenate(slot_nodes)),
        slot_nodes=slot_nodes,
    )


def rectangular_mesh(width: float, height: float, element_size: float,
                     support: str = "top") -> Mesh:
    """Plain rectangular mesh (taper disabled), for benchmarks and checks.

    All elements are active and designable; supports clamp the ``top`` or
    ``bottom`` edge nodes.
    """
    h = element_size
    nx = int(round(width / h))
    ny = int(round(height / h))
    nodes = _grid_nodes(nx, ny, h)
    elements = _grid_elements(nx, ny)
    n_cells = nx * ny
    active = np.ones(n_cells, dtype=bool)
    nondesign = np.zeros(n_cells, dtype=bool)
    row = ny if support == "top" else 0
    support_nodes = np.array([row * (nx + 1) + c for c in range(nx + 1)], dtype=np.int64)
    return Mesh(
        spec=None,
        nx=nx,
        ny=ny,
        element_size=h,
        nodes=nodes,
        elements=elements,
        active_mask=active,
        nondesign_mask=nondesign,
        support_nodes=support_nodes,
    )


def _rows_overlapping(lo: float, hi: float, h: float, ny: int) -> np.ndarray:
    """Element rows whose y-interval overlaps [lo, hi] with positive measure."""
    first = int(np.floor(lo / h + 1e-9))
    last = int(np.ceil(hi / h - 1e-9))
    return np.arange(max(first, 0), min(last, ny))


def _slot_nodes(spec: DomainSpec, elements: np.ndarray,
                cx: np.ndarray, cy: np.ndarray) -> tuple[np.ndarray, ...]:
    """Per-slot node sets, ordered front (nearest grasping edge) to back."""
    slots = sorted(spec.slot_regions, key=lambda r: r.x0)
    return tuple(
        np.unique(elements[rect.contains(cx, cy)].ravel()) for rect in slots
    )


def make_selector(mesh: Mesh, face_label: str) -> NodeSelector:
    """Node selector for a configured face.

    Labels: ``F_in1`` .. ``F_in6``, ``output``, ``actuation``. Grasping-edge
    selectors use the x displacement component (the bending direction); the
    actuation face also acts in x.
    """
    spec = mesh.spec
    if spec is None:
        raise DomainError("mesh has no domain spec; selectors are unavailable")
    h = mesh.element_size
    tol = 1e-9 * max(spec.height, spec.width_top)

    if face_label == "output":
        seg = spec.output_face
    elif face_label == "actuation":
        seg = spec.actuation_face
    elif face_label.startswith("F_in"):
        try:
            k = int(face_label[4:])
        except ValueError:
            raise DomainError(f"unknown face label {face_label!r}") from None
        if not 1 <= k <= len(spec.input_faces):
            raise DomainError(f"unknown face label {face_label!r}")
        seg = spec.input_faces[k - 1]
    else:
        raise DomainError(f"unknown face label {face_label!r}")

    if seg.length() <= tol:
        raise DomainError(f"face {face_label!r} has zero length")

    x = mesh.nodes[:, 0]
    y = mesh.nodes[:, 1]
    if seg.edge == "grasping":
        on_edge = (np.abs(x) < tol) & (y >= seg.lo - tol) & (y <= seg.hi + tol)
    else:  # top edge
        on_edge = (np.abs(y - spec.height) < tol) & (x >= seg.lo - tol) & (x <= seg.hi + tol)
        # Keep only nodes used by active elements (the top row may be trimmed
        # by the taper on the outer side).
        on_edge &= _used_node_mask(mesh)
    nodes = np.flatnonzero(on_edge)
    if nodes.size == 0:
        raise DomainError(f"face {face_label!r} matches no mesh nodes")
    return NodeSelector.uniform(face_label, nodes, dof_axis="x")


def _used_node_mask(mesh: Mesh) -> np.ndarray:
    used = np.zeros(mesh.n_nodes, dtype=bool)
    used[mesh.elements[mesh.active_ids].ravel()] = True
    return used
