"""Slow, independent reference implementations used to cross-check the
package.  Everything here is written the straightforward way — breadth-first
flood fills, dense matrix assembly, characteristic-polynomial eigenvalues —
so that agreement with the fast production code is meaningful evidence.
"""
from __future__ import annotations

import math
from collections import deque
from fractions import Fraction

import numpy as np

# ---------------------------------------------------------------------------
# voxel oracles
# ---------------------------------------------------------------------------

_OFFSETS_6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
_OFFSETS_26 = [
    (i, j, k)
    for i in (-1, 0, 1)
    for j in (-1, 0, 1)
    for k in (-1, 0, 1)
    if (i, j, k) != (0, 0, 0)
]


def flood_components(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Label connected components of a boolean volume by breadth-first
    search.  Returns an int array, 0 = background, components numbered from 1
    in scan order of their first voxel."""
    offsets = _OFFSETS_6 if connectivity == 6 else _OFFSETS_26
    mask = np.asarray(mask, dtype=bool)
    labels = np.zeros(mask.shape, dtype=np.int32)
    current = 0
    for start in zip(*np.nonzero(mask)):
        if labels[start]:
            continue
        current += 1
        queue = deque([start])
        labels[start] = current
        while queue:
            x, y, z = queue.popleft()
            for dx, dy, dz in offsets:
                n = (x + dx, y + dy, z + dz)
                if (
                    0 <= n[0] < mask.shape[0]
                    and 0 <= n[1] < mask.shape[1]
                    and 0 <= n[2] < mask.shape[2]
                    and mask[n]
                    and not labels[n]
                ):
                    labels[n] = current
                    queue.append(n)
    return labels


def component_sizes(mask: np.ndarray, connectivity: int = 26) -> list[int]:
    labels = flood_components(mask, connectivity)
    return sorted(np.bincount(labels.ravel())[1:].tolist(), reverse=True)


# ---------------------------------------------------------------------------
# distance oracles
# ---------------------------------------------------------------------------


def brute_directed_hausdorff(x: np.ndarray, y: np.ndarray) -> float:
    """max over x of min over y, via explicit squared sums and a final sqrt."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    worst = 0.0
    for p in x:
        d2 = ((y - p) ** 2).sum(axis=1).min()
        if d2 > worst:
            worst = d2
    return math.sqrt(worst)


def brute_hausdorff(x: np.ndarray, y: np.ndarray) -> float:
    return max(brute_directed_hausdorff(x, y), brute_directed_hausdorff(y, x))


# ---------------------------------------------------------------------------
# surface oracles
# ---------------------------------------------------------------------------


def euler_characteristic(triangles: np.ndarray) -> int:
    """V - E + F from the triangle list alone (counts only referenced
    vertices, so unreferenced points do not perturb the result)."""
    tris = np.asarray(triangles)
    verts = set(tris.ravel().tolist())
    edges = set()
    for a, b, c in tris:
        edges.add((min(a, b), max(a, b)))
        edges.add((min(b, c), max(b, c)))
        edges.add((min(c, a), max(c, a)))
    return len(verts) - len(edges) + len(tris)


def edge_use_counts(triangles: np.ndarray) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for a, b, c in np.asarray(triangles):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (min(u, v), max(u, v))
            counts[key] = counts.get(key, 0) + 1
    return counts


def surface_area(points: np.ndarray, triangles: np.ndarray) -> float:
    p = np.asarray(points, dtype=np.float64)
    t = np.asarray(triangles)
    cross = np.cross(p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]])
    return 0.5 * np.linalg.norm(cross, axis=1).sum()


def signed_volume(points: np.ndarray, triangles: np.ndarray) -> float:
    p = np.asarray(points, dtype=np.float64)
    t = np.asarray(triangles)
    return float(
        np.einsum("ij,ij->i", p[t[:, 0]], np.cross(p[t[:, 1]], p[t[:, 2]])).sum() / 6.0
    )


# ---------------------------------------------------------------------------
# tetrahedron / mesh oracles
# ---------------------------------------------------------------------------


def tet_volume(x0, x1, x2, x3) -> float:
    m = np.array([np.asarray(x1) - x0, np.asarray(x2) - x0, np.asarray(x3) - x0])
    return float(np.linalg.det(m)) / 6.0


def prism_volume(corners: np.ndarray) -> float:
    """Volume of a (possibly non-planar-quad) triangular prism, computed by
    divergence theorem over its faces with each quad fanned about its first
    vertex.  Valid for the straight-sided prisms used in tests."""
    c = np.asarray(corners, dtype=np.float64)
    faces = [
        (0, 2, 1),  # bottom, outward = -z for the reference prism
        (3, 4, 5),  # top
        (0, 1, 4), (0, 4, 3),
        (1, 2, 5), (1, 5, 4),
        (2, 0, 3), (2, 3, 5),
    ]
    total = 0.0
    for a, b, d in faces:
        total += np.dot(c[a], np.cross(c[b], c[d]))
    return total / 6.0


def quad_diagonal_of_split(tets: np.ndarray, quad: tuple[int, int, int, int]):
    """Which diagonal of the quad (a, b, c, d) — (a, c) or (b, d) — appears as
    an edge of some tetrahedron in ``tets``.  Returns the diagonal as a
    sorted tuple, or None if neither appears."""
    a, b, c, d = quad
    diag_candidates = [tuple(sorted((a, c))), tuple(sorted((b, d)))]
    edges = set()
    for tet in np.asarray(tets):
        for i in range(4):
            for j in range(i + 1, 4):
                edges.add(tuple(sorted((int(tet[i]), int(tet[j])))))
    found = [dg for dg in diag_candidates if dg in edges]
    if len(found) == 1:
        return found[0]
    if len(found) == 0:
        return None
    raise AssertionError(f"both diagonals of {quad} present")


def triangle_face_counts(tets: np.ndarray) -> dict[tuple[int, int, int], int]:
    counts: dict[tuple[int, int, int], int] = {}
    for tet in np.asarray(tets):
        for skip in range(4):
            face = tuple(sorted(int(tet[i]) for i in range(4) if i != skip))
            counts[face] = counts.get(face, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# FEM oracle: dense stiffness by the classical Voigt B-matrix route
# ---------------------------------------------------------------------------

# quadratic tetrahedron shape functions in parametric coordinates
# (s, t, u) with L0 = 1 - s - t - u, L1 = s, L2 = t, L3 = u and the
# mid-side ordering (0,1), (1,2), (2,0), (0,3), (1,3), (2,3).
_MID_EDGES = ((0, 1), (1, 2), (2, 0), (0, 3), (1, 3), (2, 3))


def _tet10_dN(s: float, t: float, u: float) -> np.ndarray:
    """(10, 3) derivatives of the shape functions w.r.t. (s, t, u)."""
    l = [1.0 - s - t - u, s, t, u]
    dl = np.array([[-1.0, -1.0, -1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    out = np.zeros((10, 3))
    for i in range(4):
        out[i] = (4.0 * l[i] - 1.0) * dl[i]
    for m, (a, b) in enumerate(_MID_EDGES):
        out[4 + m] = 4.0 * (l[a] * dl[b] + l[b] * dl[a])
    return out


_GAUSS_4 = [
    (0.5854101966249685, 0.1381966011250105, 0.1381966011250105),
    (0.1381966011250105, 0.5854101966249685, 0.1381966011250105),
    (0.1381966011250105, 0.1381966011250105, 0.5854101966249685),
    (0.1381966011250105, 0.1381966011250105, 0.1381966011250105),
]


def dense_stiffness(nodes: np.ndarray, elements: np.ndarray,
                    lam: float, mu: float) -> np.ndarray:
    """Dense global stiffness via 6x6 Voigt elasticity and explicit B
    matrices — an entirely different code path from the production
    tensor-contraction assembly."""
    nodes = np.asarray(nodes, dtype=np.float64)
    elements = np.asarray(elements)
    n_dof = 3 * len(nodes)
    d_mat = np.zeros((6, 6))
    d_mat[:3, :3] = lam
    d_mat[np.arange(3), np.arange(3)] += 2.0 * mu
    d_mat[3:, 3:] = mu * np.eye(3)
    k_global = np.zeros((n_dof, n_dof))
    for conn in elements:
        xe = nodes[conn]
        ke = np.zeros((30, 30))
        for s, t, u in _GAUSS_4:
            dn = _tet10_dN(s, t, u)
            jac = xe.T @ dn  # (3, 3): dx/d(s,t,u)
            det = np.linalg.det(jac)
            grad = dn @ np.linalg.inv(jac)  # (10, 3) spatial gradients
            b = np.zeros((6, 30))
            for a in range(10):
                gx, gy, gz = grad[a]
                b[0, 3 * a] = gx
                b[1, 3 * a + 1] = gy
                b[2, 3 * a + 2] = gz
                b[3, 3 * a] = gy
                b[3, 3 * a + 1] = gx
                b[4, 3 * a + 1] = gz
                b[4, 3 * a + 2] = gy
                b[5, 3 * a] = gz
                b[5, 3 * a + 2] = gx
            ke += (det / 24.0) * b.T @ d_mat @ b
        # dofs for node a are (3a, 3a+1, 3a+2) in element-local order
        dofs = np.repeat(3 * conn, 3) + np.tile([0, 1, 2], 10)
        k_global[np.ix_(dofs, dofs)] += ke
    return k_global


def hooke_stress(strain: np.ndarray, lam: float, mu: float) -> np.ndarray:
    strain = np.asarray(strain, dtype=np.float64)
    return lam * np.trace(strain) * np.eye(3) + 2.0 * mu * strain


# ---------------------------------------------------------------------------
# eigenvalue and percentile oracles
# ---------------------------------------------------------------------------


def principal_max_roots(tensor: np.ndarray) -> float:
    """Largest eigenvalue of a symmetric 3x3 via the characteristic
    polynomial and numpy's polynomial root finder."""
    t = np.asarray(tensor, dtype=np.float64)
    i1 = np.trace(t)
    i2 = 0.5 * (i1 ** 2 - np.trace(t @ t))
    i3 = np.linalg.det(t)
    roots = np.roots([1.0, -i1, i2, -i3])
    return float(np.max(roots.real))


def nearest_rank_exact(values, p) -> float:
    """Nearest-rank percentile with exact rational arithmetic for the rank."""
    ordered = sorted(float(v) for v in values)
    n = len(ordered)
    rank = math.ceil(Fraction(p) * n / 100)
    rank = min(max(rank, 1), n)
    return ordered[rank - 1]


# ---------------------------------------------------------------------------
# thick-walled cylinder reference solution (internal pressure, plane strain)
# ---------------------------------------------------------------------------


def cylinder_hoop_stress(r: float, pressure: float, r_in: float, r_out: float) -> float:
    return pressure * r_in ** 2 * (1.0 + r_out ** 2 / r ** 2) / (r_out ** 2 - r_in ** 2)


def cylinder_radial_stress(r: float, pressure: float, r_in: float, r_out: float) -> float:
    return pressure * r_in ** 2 * (1.0 - r_out ** 2 / r ** 2) / (r_out ** 2 - r_in ** 2)


def cylinder_radial_displacement(r: float, pressure: float, r_in: float,
                                 r_out: float, e_mod: float, nu: float) -> float:
    factor = (1.0 + nu) * pressure * r_in ** 2 / (e_mod * (r_out ** 2 - r_in ** 2))
    return factor * ((1.0 - 2.0 * nu) * r + r_out ** 2 / r)
