"""Meshes, reference elements, quadrature rules and periodic pairing.

Two element kinds are supported: six-noded quadratic triangles (``tri6``) for
the RVE meshes and eight-noded serendipity quadrilaterals (``quad8``) for the
macro structure.  Local node orderings::

    tri6                 quad8
    2                    3---6---2
    | \\                  |       |
    5   4                7       5
    |     \\              |       |
    0---3---1            0---4---1
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .exceptions import MeshError

NODES_PER_ELEMENT = {"tri6": 6, "quad8": 8}

# Boundary tag of nodes on the outer RVE (or macro) boundary; ellipse
# boundaries carry their own tags >= 2.
OUTER_TAG = 1


def _check_kind(elem_kind):
    if elem_kind not in NODES_PER_ELEMENT:
        raise MeshError(f"unknown element kind {elem_kind!r}")


# ---------------------------------------------------------------------------
# Reference elements
# ---------------------------------------------------------------------------

def _tri6(xi, eta):
    z = 1.0 - xi - eta
    N = np.stack([
        z * (2 * z - 1), xi * (2 * xi - 1), eta * (2 * eta - 1),
        4 * xi * z, 4 * xi * eta, 4 * eta * z,
    ], axis=-1)
    dxi = np.stack([
        1 - 4 * z, 4 * xi - 1, np.zeros_like(xi),
        4 * (z - xi), 4 * eta, -4 * eta,
    ], axis=-1)
    deta = np.stack([
        1 - 4 * z, np.zeros_like(xi), 4 * eta - 1,
        -4 * xi, 4 * xi, 4 * (z - eta),
    ], axis=-1)
    return N, np.stack([dxi, deta], axis=-1)


_Q8_CORNERS = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)


def _quad8(xi, eta):
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    N, dxi, deta = [], [], []
    for xa, ya in _Q8_CORNERS:
        a, b = 1 + xa * xi, 1 + ya * eta
        N.append(0.25 * a * b * (xa * xi + ya * eta - 1))
        dxi.append(0.25 * xa * b * (2 * xa * xi + ya * eta))
        deta.append(0.25 * ya * a * (xa * xi + 2 * ya * eta))
    N.append(0.5 * (1 - xi**2) * (1 - eta))
    dxi.append(-xi * (1 - eta))
    deta.append(-0.5 * (1 - xi**2))
    N.append(0.5 * (1 + xi) * (1 - eta**2))
    dxi.append(0.5 * (1 - eta**2))
    deta.append(-(1 + xi) * eta)
    N.append(0.5 * (1 - xi**2) * (1 + eta))
    dxi.append(-xi * (1 + eta))
    deta.append(0.5 * (1 - xi**2))
    N.append(0.5 * (1 - xi) * (1 - eta**2))
    dxi.append(-0.5 * (1 - eta**2))
    deta.append(-(1 - xi) * eta)
    return np.stack(N, axis=-1), np.stack([np.stack(dxi, -1), np.stack(deta, -1)], axis=-1)


REFERENCE_NODES = {
    "tri6": np.array([[0, 0], [1, 0], [0, 1], [0.5, 0], [0.5, 0.5], [0, 0.5]], dtype=float),
    "quad8": np.array([[-1, -1], [1, -1], [1, 1], [-1, 1],
                       [0, -1], [1, 0], [0, 1], [-1, 0]], dtype=float),
}


def shape_eval(elem_kind, local_point):
    """Evaluate Lagrange shape functions and their reference gradients.

    Parameters
    ----------
    elem_kind : {'tri6', 'quad8'}
    local_point : array_like, shape (2,) or (n, 2)
        Point(s) in reference coordinates.

    Returns
    -------
    values : ndarray, shape (nen,) or (n, nen)
    gradients : ndarray, shape (nen, 2) or (n, nen, 2)
        Derivatives with respect to the two reference coordinates.
    """
    _check_kind(elem_kind)
    p = np.asarray(local_point, dtype=float)
    fn = _tri6 if elem_kind == "tri6" else _quad8
    return fn(p[..., 0], p[..., 1])


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise MeshError("quadrature weights must be positive")

    @property
    def size(self):
        return len(self.weights)


def quadrature_for(elem_kind):
    """Degree-2 three-point rule on ``tri6``; 2x2 Gauss-Legendre on ``quad8``."""
    _check_kind(elem_kind)
    if elem_kind == "tri6":
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        return QuadratureRule(pts, np.full(3, 1 / 6))
    g = 1 / np.sqrt(3.0)
    pts = np.array([[-g, -g], [g, -g], [g, g], [-g, g]])
    return QuadratureRule(pts, np.ones(4))


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ellipse:
    """Ellipse ``c + R(angle) [a cos t, b sin t]`` attached to a boundary tag."""

    tag: int
    cx: float
    cy: float
    a: float
    b: float
    angle: float = 0.0

    def point(self, t, a=None, b=None):
        a = self.a if a is None else a
        b = self.b if b is None else b
        c, s = np.cos(self.angle), np.sin(self.angle)
        lx, ly = a * np.cos(t), b * np.sin(t)
        return np.stack([self.cx + c * lx - s * ly, self.cy + s * lx + c * ly], axis=-1)

    def parametric_angle(self, xy):
        """Parametric angle of (near-)boundary points."""
        xy = np.atleast_2d(xy)
        c, s = np.cos(self.angle), np.sin(self.angle)
        dx, dy = xy[:, 0] - self.cx, xy[:, 1] - self.cy
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        return np.arctan2(ly / self.b, lx / self.a)

    def contains(self, xy, scale=1.0):
        xy = np.atleast_2d(xy)
        c, s = np.cos(self.angle), np.sin(self.angle)
        dx, dy = xy[:, 0] - self.cx, xy[:, 1] - self.cy
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        return (lx / (scale * self.a)) ** 2 + (ly / (scale * self.b)) ** 2 < 1.0

    @property
    def area(self):
        return np.pi * self.a * self.b


@dataclass(frozen=True)
class QuadData:
    """Per-element, per-quadrature-point geometric data on a fixed mesh."""

    N: np.ndarray         # (nq, nen) shape values
    dNdX: np.ndarray      # (ne, nq, nen, 2) physical gradients
    detJ: np.ndarray      # (ne, nq)
    weights: np.ndarray   # (ne, nq) reference weight * detJ
    points: np.ndarray    # (ne, nq, 2) physical coordinates

    @property
    def n_points(self):
        return self.weights.size


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray
    elements: np.ndarray
    elem_kind: str
    regions: np.ndarray
    boundary_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    boundary_tags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ellipses: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.ascontiguousarray(self.nodes, dtype=float))
        object.__setattr__(self, "elements", np.ascontiguousarray(self.elements, dtype=np.int64))
        object.__setattr__(self, "regions", np.ascontiguousarray(self.regions, dtype=np.int64))
        object.__setattr__(self, "boundary_nodes", np.asarray(self.boundary_nodes, dtype=np.int64))
        object.__setattr__(self, "boundary_tags", np.asarray(self.boundary_tags, dtype=np.int64))
        object.__setattr__(self, "ellipses", tuple(self.ellipses))
        for arr in (self.nodes, self.elements, self.regions, self.boundary_nodes, self.boundary_tags):
            arr.setflags(write=False)
        self._validate()

    def _validate(self):
        _check_kind(self.elem_kind)
        nen = NODES_PER_ELEMENT[self.elem_kind]
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise MeshError("nodes must be an (n, 2) array")
        if self.elements.ndim != 2 or self.elements.shape[1] != nen:
            raise MeshError(f"{self.elem_kind} elements need {nen} nodes each")
        n = len(self.nodes)
        bad = np.nonzero((self.elements >= n) | (self.elements < 0))
        if len(bad[0]):
            e = bad[0][0]
            raise MeshError(f"connectivity out of range: element {e} references node "
                            f"{self.elements[e, bad[1][0]]} (mesh has {n} nodes)")
        if len(self.regions) != len(self.elements):
            raise MeshError(f"{len(self.regions)} region tags for {len(self.elements)} elements")
        if len(self.boundary_nodes) != len(self.boundary_tags):
            raise MeshError("boundary node/tag length mismatch")
        if len(self.boundary_nodes) and (self.boundary_nodes.max() >= n or self.boundary_nodes.min() < 0):
            raise MeshError("boundary block references a node out of range")
        detJ = self.quadrature.detJ
        if np.any(detJ <= 0):
            e, q = np.unravel_index(np.argmin(detJ), detJ.shape)
            raise MeshError(f"non-positive Jacobian determinant {detJ[e, q]:.3e} in element {e} "
                            f"at quadrature point {q}")

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def n_points(self):
        """Total number of quadrature points."""
        return self.n_elements * quadrature_for(self.elem_kind).size

    @cached_property
    def quadrature(self):
        rule = quadrature_for(self.elem_kind)
        N, dN = shape_eval(self.elem_kind, rule.points)          # (nq,nen), (nq,nen,2)
        X = self.nodes[self.elements]                            # (ne,nen,2)
        J = np.einsum("eai,qaj->eqij", X, dN)
        detJ = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        Jinv = np.empty_like(J)
        with np.errstate(divide="ignore", invalid="ignore"):
            Jinv[..., 0, 0] = J[..., 1, 1] / detJ
            Jinv[..., 1, 1] = J[..., 0, 0] / detJ
            Jinv[..., 0, 1] = -J[..., 0, 1] / detJ
            Jinv[..., 1, 0] = -J[..., 1, 0] / detJ
        dNdX = np.einsum("qaj,eqji->eqai", dN, Jinv)
        pts = np.einsum("qa,eai->eqi", N, X)
        return QuadData(N=N, dNdX=dNdX, detJ=detJ, weights=detJ * rule.weights, points=pts)

    @cached_property
    def point_regions(self):
        """Region tag of every quadrature point (flattened element-major)."""
        nq = quadrature_for(self.elem_kind).size
        return np.repeat(self.regions, nq)

    @property
    def area(self):
        return float(self.quadrature.weights.sum())

    @cached_property
    def bbox(self):
        return np.concatenate([self.nodes.min(axis=0), self.nodes.max(axis=0)])

    @property
    def box_area(self):
        """Area of the bounding box, the averaging volume of effective quantities."""
        x0, y0, x1, y1 = self.bbox
        return float((x1 - x0) * (y1 - y0))

    def nodes_with_tag(self, tag):
        return self.boundary_nodes[self.boundary_tags == tag]

    @cached_property
    def fingerprint(self):
        h = hashlib.sha256()
        h.update(self.elem_kind.encode())
        for arr in (self.nodes, self.elements, self.regions, self.boundary_nodes, self.boundary_tags):
            h.update(np.ascontiguousarray(arr).astype("<f8" if arr.dtype.kind == "f" else "<i8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Periodic pairing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PeriodicPairing:
    """Master/slave node pairs across opposite edges of a rectangular cell.

    ``pairs[:, 0]`` are masters (left or bottom edge), ``pairs[:, 1]`` slaves.
    The anchor (bottom-left corner) fluctuation is pinned to zero and the other
    three corners are slaved to it.
    """

    pairs: np.ndarray
    corners: np.ndarray
    anchor: int
    n_nodes: int

    @cached_property
    def dof_map(self):
        """Reduced DOF index of every full DOF ``2*node + comp``; -1 if pinned."""
        slave_of = np.full(self.n_nodes, -1, dtype=np.int64)
        slave_of[self.pairs[:, 1]] = self.pairs[:, 0]
        pinned = np.zeros(self.n_nodes, dtype=bool)
        pinned[self.anchor] = True
        pinned[self.corners] = True
        independent = (slave_of < 0) & ~pinned
        idx = np.full(self.n_nodes, -1, dtype=np.int64)
        idx[independent] = np.arange(independent.sum())
        master = np.where(slave_of >= 0, slave_of, np.arange(self.n_nodes))
        node_idx = np.where(pinned, -1, idx[master])
        dm = np.empty(2 * self.n_nodes, dtype=np.int64)
        dm[0::2] = np.where(node_idx >= 0, 2 * node_idx, -1)
        dm[1::2] = np.where(node_idx >= 0, 2 * node_idx + 1, -1)
        dm.setflags(write=False)
        return dm

    @property
    def n_free(self):
        return 2 * (self.n_nodes - len(self.pairs) - len(self.corners) - 1)

    def expand(self, w_red):
        """Map reduced DOF vector(s) ``(n_free, ...)`` to full nodal DOFs."""
        w_red = np.asarray(w_red)
        ext = np.concatenate([w_red, np.zeros((1,) + w_red.shape[1:])], axis=0)
        dm = np.where(self.dof_map >= 0, self.dof_map, self.n_free)
        return ext[dm]

    def restrict(self, w_full):
        """Pick independent DOF values from a periodic full vector."""
        out = np.zeros((self.n_free,) + np.shape(w_full)[1:])
        valid = self.dof_map >= 0
        out[self.dof_map[valid]] = np.asarray(w_full)[valid]
        return out


def periodic_pairs(mesh, tol=1e-8):
    """Pair boundary nodes across opposite edges of the mesh bounding box.

    Raises
    ------
    MeshError
        If a node on one edge has no partner within ``tol`` on the opposite edge.
    """
    x0, y0, x1, y1 = mesh.bbox
    X = mesh.nodes
    left = np.abs(X[:, 0] - x0) < tol
    right = np.abs(X[:, 0] - x1) < tol
    bottom = np.abs(X[:, 1] - y0) < tol
    top = np.abs(X[:, 1] - y1) < tol
    corner = (left | right) & (bottom | top)
    anchor_mask = left & bottom
    if anchor_mask.sum() != 1 or corner.sum() != 4:
        raise MeshError("periodic pairing needs exactly one node at each cell corner")
    anchor = int(np.flatnonzero(anchor_mask)[0])
    corners = np.flatnonzero(corner & ~anchor_mask)

    pairs = []
    for master_mask, slave_mask, axis in ((left, right, 1), (bottom, top, 0)):
        m_ids = np.flatnonzero(master_mask & ~corner)
        s_ids = np.flatnonzero(slave_mask & ~corner)
        m_sorted = m_ids[np.argsort(X[m_ids, axis])]
        s_sorted = s_ids[np.argsort(X[s_ids, axis])]
        for ids, other, side in ((m_sorted, s_sorted, "master"), (s_sorted, m_sorted, "slave")):
            for i in ids:
                j = np.searchsorted(X[other, axis], X[i, axis]) if len(other) else 0
                cand = [k for k in (j - 1, j) if 0 <= k < len(other)]
                if not cand or min(abs(X[other[k], axis] - X[i, axis]) for k in cand) > tol:
                    raise MeshError(f"unmatched periodic boundary node {i} at {X[i].tolist()} ({side} side)")
        pairs.append(np.stack([m_sorted, s_sorted], axis=1) if len(m_sorted) else np.zeros((0, 2), np.int64))
    pairs = np.concatenate(pairs).astype(np.int64)
    return PeriodicPairing(pairs=pairs, corners=corners.astype(np.int64), anchor=anchor, n_nodes=mesh.n_nodes)


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

def save_mesh(mesh, path):
    lines = [f"mesh2d v1 {mesh.elem_kind}", f"nodes {mesh.n_nodes}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.nodes.tolist()]
    lines.append(f"elements {mesh.n_elements}")
    lines += [" ".join(map(str, row)) for row in mesh.elements.tolist()]
    lines.append("regions")
    lines += [str(r) for r in mesh.regions.tolist()]
    if len(mesh.boundary_nodes):
        lines.append(f"boundary {len(mesh.boundary_nodes)}")
        lines += [f"{n} {t}" for n, t in zip(mesh.boundary_nodes.tolist(), mesh.boundary_tags.tolist())]
    if mesh.ellipses:
        lines.append(f"ellipses {len(mesh.ellipses)}")
        lines += [f"{e.tag} {e.cx!r} {e.cy!r} {e.a!r} {e.b!r} {e.angle!r}" for e in mesh.ellipses]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path):
    """Read a ``mesh2d v1`` text file and validate it.

    Raises
    ------
    MeshError
        On syntax errors (with the offending line number) or violated invariants.
    """
    raw = Path(path).read_text().splitlines()
    rows = [(i + 1, ln.split("#", 1)[0].split()) for i, ln in enumerate(raw)]
    rows = [(no, tok) for no, tok in rows if tok]
    pos = 0

    def fail(no, msg):
        raise MeshError(f"{path}:{no}: {msg}")

    def take(count, width, conv, what):
        nonlocal pos
        out = []
        for _ in range(count):
            if pos >= len(rows):
                fail(len(raw), f"unexpected end of file while reading {what}")
            no, tok = rows[pos]
            if width is not None and len(tok) != width:
                fail(no, f"expected {width} values in {what} line, got {len(tok)}")
            try:
                out.append([c(t) for c, t in zip(conv, tok)] if isinstance(conv, tuple) else [conv(t) for t in tok])
            except ValueError as exc:
                fail(no, f"bad value in {what}: {exc}")
            pos += 1
        return out

    if not rows or rows[0][1][:2] != ["mesh2d", "v1"] or len(rows[0][1]) != 3:
        fail(rows[0][0] if rows else 1, "header must be 'mesh2d v1 <elem_kind>'")
    kind = rows[0][1][2]
    if kind not in NODES_PER_ELEMENT:
        fail(rows[0][0], f"unknown element kind {kind!r}")
    pos = 1
    sections = {}
    while pos < len(rows):
        no, tok = rows[pos]
        key = tok[0]
        pos += 1
        if key == "nodes" and len(tok) == 2:
            sections["nodes"] = take(int(tok[1]), 2, float, "nodes")
        elif key == "elements" and len(tok) == 2:
            sections["elements"] = take(int(tok[1]), NODES_PER_ELEMENT[kind], int, "elements")
        elif key == "regions" and len(tok) == 1:
            if "elements" not in sections:
                fail(no, "regions block before elements block")
            sections["regions"] = take(len(sections["elements"]), 1, int, "regions")
        elif key == "boundary":
            count = int(tok[1]) if len(tok) == 2 else None
            if count is None:
                start = pos
                while pos < len(rows) and len(rows[pos][1]) == 2 and rows[pos][1][0].lstrip("-").isdigit():
                    pos += 1
                count, pos = pos - start, start
            sections["boundary"] = take(count, 2, int, "boundary")
        elif key == "ellipses" and len(tok) == 2:
            sections["ellipses"] = take(int(tok[1]), 6, (int, float, float, float, float, float), "ellipses")
        else:
            fail(no, f"unexpected line {' '.join(tok)!r}")
    for req in ("nodes", "elements", "regions"):
        if req not in sections:
            fail(len(raw), f"missing {req} block")
    bnd = np.array(sections.get("boundary", []), dtype=np.int64).reshape(-1, 2)
    return Mesh(
        nodes=np.array(sections["nodes"], dtype=float).reshape(-1, 2),
        elements=np.array(sections["elements"], dtype=np.int64),
        elem_kind=kind,
        regions=np.array(sections["regions"], dtype=np.int64).ravel(),
        boundary_nodes=bnd[:, 0],
        boundary_tags=bnd[:, 1],
        ellipses=tuple(Ellipse(*row) for row in sections.get("ellipses", [])),
    )


def structured_square(n, size=1.0, region=1):
    """Unit-square ``tri6`` mesh: ``n x n`` cells each split into two triangles."""
    m = 2 * n + 1
    g = np.linspace(0.0, size, m)
    X, Y = np.meshgrid(g, g, indexing="xy")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
    nid = lambda i, j: j * m + i  # noqa: E731
    elems = []
    for j in range(n):
        for i in range(n):
            i0, j0 = 2 * i, 2 * j
            a, b = nid(i0, j0), nid(i0 + 2, j0)
            c, d = nid(i0 + 2, j0 + 2), nid(i0, j0 + 2)
            elems.append([a, b, c, nid(i0 + 1, j0), nid(i0 + 2, j0 + 1), nid(i0 + 1, j0 + 1)])
            elems.append([a, c, d, nid(i0 + 1, j0 + 1), nid(i0 + 1, j0 + 2), nid(i0, j0 + 1)])
    on_b = (np.isclose(nodes[:, 0], 0) | np.isclose(nodes[:, 0], size)
            | np.isclose(nodes[:, 1], 0) | np.isclose(nodes[:, 1], size))
    bn = np.flatnonzero(on_b)
    return Mesh(nodes=nodes, elements=np.array(elems), elem_kind="tri6",
                regions=np.full(len(elems), region), boundary_nodes=bn,
                boundary_tags=np.full(len(bn), OUTER_TAG))


def rectangle_quad8(nx, ny, width, height):
    """Structured ``quad8`` mesh of ``[0, width] x [0, height]``."""
    xs = np.linspace(0.0, width, 2 * nx + 1)
    ys = np.linspace(0.0, height, 2 * ny + 1)
    ids = -np.ones((2 * ny + 1, 2 * nx + 1), dtype=np.int64)
    nodes = []
    for j, y in enumerate(ys):
        for i, x in enumerate(xs):
            if i % 2 and j % 2:
                continue
            ids[j, i] = len(nodes)
            nodes.append((x, y))
    elems = []
    for j in range(ny):
        for i in range(nx):
            I, J = 2 * i, 2 * j
            elems.append([ids[J, I], ids[J, I + 2], ids[J + 2, I + 2], ids[J + 2, I],
                          ids[J, I + 1], ids[J + 1, I + 2], ids[J + 2, I + 1], ids[J + 1, I]])
    nodes = np.array(nodes)
    on_b = (np.isclose(nodes[:, 0], 0) | np.isclose(nodes[:, 0], width)
            | np.isclose(nodes[:, 1], 0) | np.isclose(nodes[:, 1], height))
    bn = np.flatnonzero(on_b)
    return Mesh(nodes=nodes, elements=np.array(elems), elem_kind="quad8",
                regions=np.ones(len(elems), dtype=np.int64), boundary_nodes=bn,
                boundary_tags=np.full(len(bn), OUTER_TAG))
