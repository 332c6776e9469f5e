"""Conforming ``tri6`` meshes of RVEs with elliptical inclusions or holes.

The linear triangulation is delegated to Triangle (constrained Delaunay with
quality refinement, no Steiner points on segments so that opposite cell edges
keep identical node layouts).  Midside nodes on ellipse edges are placed on the
ellipse at the mean parametric angle of the edge.
"""

import math

import numpy as np
import triangle

from .exceptions import MeshError
from .meshkit import OUTER_TAG, Ellipse, Mesh

MATRIX = 1
INCLUSION = 2

# Parent geometry of the porous cell: (v_void, kappa).
POROUS_PARENT = (0.45, 1.25)


def porous_axes(v_void, kappa):
    """Semi-axes ``(a, b)`` of each of the four holes, ``v_void = 4 pi a b``."""
    a = math.sqrt(v_void / (4.0 * math.pi * kappa))
    return a, kappa * a


def porous_holes(v_void=POROUS_PARENT[0], kappa=POROUS_PARENT[1]):
    """Four holes on a 2x2 lattice with alternating major-axis orientation."""
    a, b = porous_axes(v_void, kappa)
    layout = [(0.25, 0.25, 0.0), (0.75, 0.25, math.pi / 2),
              (0.25, 0.75, math.pi / 2), (0.75, 0.75, 0.0)]
    return tuple(Ellipse(2 + k, cx, cy, a, b, ang) for k, (cx, cy, ang) in enumerate(layout))


def _inflated_overlap(e1, e2, s, gap, n=72):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    big1 = Ellipse(0, e1.cx, e1.cy, s * e1.a + gap / 2, s * e1.b + gap / 2, e1.angle)
    big2 = Ellipse(0, e2.cx, e2.cy, s * e2.a + gap / 2, s * e2.b + gap / 2, e2.angle)
    return bool(big2.contains(big1.point(t)).any() or big1.contains(big2.point(t)).any()
                or big1.contains([[e2.cx, e2.cy]]).any())


def random_inclusions(count, volume_fraction, seed, scale_max=1.2, gap=0.03,
                      aspect=(1.0, 1.6), max_tries=20000):
    """Randomly placed, randomly oriented non-overlapping ellipses.

    The ellipses stay separated by ``gap`` from each other and from the cell
    boundary even after uniform scaling by ``scale_max``.
    """
    rng = np.random.default_rng(seed)
    rel = rng.uniform(0.7, 1.3, size=count)
    areas = np.sort(volume_fraction * rel / rel.sum())[::-1]
    placed = []
    for k in range(count):
        r = rng.uniform(*aspect)
        a = math.sqrt(areas[k] / (math.pi * r))
        b = r * a
        for _ in range(max_tries):
            ang = rng.uniform(0, math.pi)
            ext = scale_max * max(a, b) + gap
            cx, cy = rng.uniform(ext, 1 - ext, size=2)
            cand = Ellipse(2 + k, float(cx), float(cy), a, b, float(ang))
            if not any(_inflated_overlap(cand, e, scale_max, gap) for e in placed):
                placed.append(cand)
                break
        else:
            raise MeshError(f"could not place inclusion {k} without overlap")
    return tuple(placed)


def _segments_loop(start, count):
    idx = np.arange(count) + start
    return np.stack([idx, np.roll(idx, -1)], axis=1)


def rve_mesh(ellipses, h, holes=False, min_angle=28.0):
    """Mesh the unit cell with the given ellipses as inclusions or holes.

    Parameters
    ----------
    ellipses : sequence of Ellipse
        Interior ellipses (must not touch the cell boundary).
    h : float
        Target edge length.
    holes : bool
        Remove the ellipse interiors instead of tagging them as region 2.
    """
    n = max(2, math.ceil(1.0 / h))
    t = np.linspace(0.0, 1.0, n + 1)[:-1]
    outer = np.concatenate([
        np.stack([t, np.zeros(n)], 1), np.stack([np.ones(n), t], 1),
        np.stack([1 - t, np.ones(n)], 1), np.stack([np.zeros(n), 1 - t], 1),
    ])
    verts = [outer]
    segs = [_segments_loop(0, len(outer))]
    ell_ranges = []
    start = len(outer)
    for e in ellipses:
        perim = math.pi * (3 * (e.a + e.b) - math.sqrt((3 * e.a + e.b) * (e.a + 3 * e.b)))
        m = max(12, math.ceil(perim / h))
        th = 2 * np.pi * np.arange(m) / m
        verts.append(e.point(th))
        segs.append(_segments_loop(start, m))
        ell_ranges.append((start, m))
        start += m
    data = {"vertices": np.concatenate(verts), "segments": np.concatenate(segs)}
    opts = f"pq{min_angle}a{h * h * math.sqrt(3) / 4:.10f}YYQ"
    if holes:
        if ellipses:
            data["holes"] = np.array([[e.cx, e.cy] for e in ellipses])
    else:
        probe = np.array([[1e-4, 1e-4]])
        data["regions"] = [[e.cx, e.cy, INCLUSION, 0] for e in ellipses] + [[*probe[0], MATRIX, 0]]
        opts += "A"
    out = triangle.triangulate(data, opts)
    V = np.asarray(out["vertices"], dtype=float)
    T = np.asarray(out["triangles"], dtype=np.int64)
    if holes or not ellipses:
        reg = np.full(len(T), MATRIX)
    else:
        reg = np.asarray(out["triangle_attributes"]).ravel().round().astype(np.int64)

    # vertex -> (ellipse index, position on the ellipse polygon)
    on_ell = {}
    for k, (s, m) in enumerate(ell_ranges):
        for j in range(m):
            on_ell[s + j] = (k, j, m)

    nodes = [tuple(p) for p in V]
    tags = {}
    for v, (k, _, _) in on_ell.items():
        tags[v] = ellipses[k].tag
    edge_mid = {}
    elems = np.empty((len(T), 6), dtype=np.int64)
    elems[:, :3] = T
    for e_id, tri in enumerate(T):
        for slot, (p, q) in enumerate(((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0]))):
            key = (min(p, q), max(p, q))
            if key not in edge_mid:
                mid = 0.5 * (V[p] + V[q])
                tag = None
                if p in on_ell and q in on_ell:
                    kp, jp, m = on_ell[p]
                    kq, jq, _ = on_ell[q]
                    if kp == kq and (jp - jq) % m in (1, m - 1):
                        j0 = jp if (jq - jp) % m == 1 else jq
                        mid = ellipses[kp].point(2 * np.pi * (j0 + 0.5) / m)
                        tag = ellipses[kp].tag
                edge_mid[key] = len(nodes)
                if tag is not None:
                    tags[len(nodes)] = tag
                nodes.append(tuple(mid))
            elems[e_id, 3 + slot] = edge_mid[key]
    nodes = np.array(nodes)
    on_outer = ((np.abs(nodes[:, 0]) < 1e-12) | (np.abs(nodes[:, 0] - 1) < 1e-12)
                | (np.abs(nodes[:, 1]) < 1e-12) | (np.abs(nodes[:, 1] - 1) < 1e-12))
    for v in np.flatnonzero(on_outer):
        tags[int(v)] = OUTER_TAG
    bn = np.array(sorted(tags), dtype=np.int64)
    bt = np.array([tags[i] for i in bn], dtype=np.int64)
    return Mesh(nodes=nodes, elements=elems, elem_kind="tri6", regions=reg,
                boundary_nodes=bn, boundary_tags=bt, ellipses=tuple(ellipses))


def composite_rve(h=0.07, count=6, volume_fraction=0.234, seed=7):
    """Matrix with ``count`` random stiff inclusions (parent scale 1)."""
    return rve_mesh(random_inclusions(count, volume_fraction, seed), h)


def porous_rve(h=0.06):
    """Porous cell meshed at the parent geometry."""
    return rve_mesh(porous_holes(), h, holes=True)
