"""Triangle surfaces: iso-surface extraction, smoothing, inward offsetting, end caps.

All coordinates are in mm.  Closed surfaces are oriented with outward normals,
which makes the divergence-theorem signed volume positive.
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np
from skimage import measure

from .volume import BinaryMask


class SelfIntersectionError(RuntimeError):
    """Two non-adjacent triangles overlap after an offset."""

    def __init__(self, tri_a: int, tri_b: int):
        super().__init__(f"surface self-intersection between triangles {tri_a} and {tri_b}")
        self.pair = (int(tri_a), int(tri_b))


@dataclasses.dataclass(frozen=True)
class TriSurface:
    """Oriented triangle surface: vertices (mm), triangle index triples, vertex normals."""

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray = None

    def __post_init__(self):
        vertices = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        triangles = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (n,3), got {vertices.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise ValueError(f"triangles must be (m,3), got {triangles.shape}")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ValueError("triangle indices out of range")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        normals = self.normals
        if normals is None:
            normals = vertex_normals(vertices, triangles)
        else:
            normals = np.ascontiguousarray(np.asarray(normals, dtype=np.float64))
            if normals.shape != vertices.shape:
                raise ValueError("normals must match vertices in shape")
        object.__setattr__(self, "normals", normals)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)


def triangle_normals(vertices: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-triangle (unit normal, area) from the winding order."""
    tri = vertices[triangles]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(cross, axis=1)
    areas = 0.5 * norm
    unit = np.divide(cross, norm[:, None], out=np.zeros_like(cross), where=norm[:, None] > 0)
    return unit, areas


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Angle-weighted average of incident triangle normals, normalized per
    vertex.  Angle weighting is tessellation-independent: splitting a planar
    quad into two triangles does not bias its corners' normals the way area
    or uniform weighting would."""
    tri = vertices[triangles]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    nrm = np.linalg.norm(cross, axis=1)
    unit = np.divide(cross, nrm[:, None], out=np.zeros_like(cross),
                     where=nrm[:, None] > 0)
    acc = np.zeros_like(vertices)
    for k in range(3):
        e1 = tri[:, (k + 1) % 3] - tri[:, k]
        e2 = tri[:, (k + 2) % 3] - tri[:, k]
        dots = np.einsum("ij,ij->i", e1, e2)
        denom = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
        cosang = np.divide(dots, denom, out=np.zeros_like(dots),
                           where=denom > 0)
        angle = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(acc, triangles[:, k], unit * angle[:, None])
    norm = np.linalg.norm(acc, axis=1)
    return np.divide(acc, norm[:, None], out=np.zeros_like(acc), where=norm[:, None] > 0)


def surface_area(s: TriSurface) -> float:
    return float(triangle_normals(s.vertices, s.triangles)[1].sum())


def enclosed_volume(s: TriSurface) -> float:
    """Signed volume by the divergence theorem; positive for outward orientation."""
    tri = s.vertices[s.triangles]
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def edge_counts(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges and the number of triangles sharing each."""
    edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    unique, counts = np.unique(edges, axis=0, return_counts=True)
    return unique, counts


def boundary_edges(triangles: np.ndarray) -> np.ndarray:
    unique, counts = edge_counts(triangles)
    return unique[counts == 1]


def euler_characteristic(s: TriSurface) -> int:
    used = np.unique(s.triangles)
    unique_edges, _ = edge_counts(s.triangles)
    return int(len(used) - len(unique_edges) + len(s.triangles))


def check_surface(s: TriSurface, require_closed: bool = True,
                  degenerate_tol: float = 1e-12) -> None:
    """Raise if the surface violates the manifold/winding/degeneracy invariants."""
    _, areas = triangle_normals(s.vertices, s.triangles)
    if len(areas) and areas.min() <= degenerate_tol:
        raise ValueError(f"degenerate triangle with area {areas.min():.3g} mm^2")
    unique, counts = edge_counts(s.triangles)
    if counts.max(initial=0) > 2:
        raise ValueError("non-manifold edge shared by more than 2 triangles")
    if require_closed and np.any(counts == 1):
        raise ValueError(f"{int((counts == 1).sum())} boundary edges on a surface "
                         "declared closed")
    # Consistent winding: each shared edge must be traversed once per direction.
    directed = np.concatenate([s.triangles[:, [0, 1]], s.triangles[:, [1, 2]],
                               s.triangles[:, [2, 0]]])
    _, dir_counts = np.unique(directed, axis=0, return_counts=True)
    if dir_counts.max(initial=0) > 1:
        raise ValueError("inconsistent triangle winding (repeated directed edge)")


def extract_isosurface(mask: BinaryMask) -> TriSurface:
    """Marching-cubes surface of the 0/1 indicator at iso-level 0.5.

    Vertices land exactly on voxel-edge midpoints; the output is watertight
    and oriented outward.
    """
    if mask.count == 0:
        raise ValueError("extract_isosurface: input mask is empty")
    padded = np.pad(mask.values, 1, mode="constant", constant_values=False)
    verts, faces, _, _ = measure.marching_cubes(
        padded.astype(np.float64), level=0.5, allow_degenerate=False)
    spacing = np.asarray(mask.spacing)
    verts = (verts - 1.0) * spacing + np.asarray(mask.origin)
    s = TriSurface(vertices=verts, triangles=faces)
    if enclosed_volume(s) < 0:
        s = TriSurface(vertices=verts, triangles=faces[:, ::-1])
    return s


def laplacian_smooth(s: TriSurface, iterations: int, lam: float,
                     fixed: np.ndarray | None = None) -> TriSurface:
    """Umbrella smoothing: each pass moves vertices by lam*(1-ring centroid - vertex).

    `fixed` optionally lists vertex indices to pin (used to keep flat end caps
    planar); connectivity never changes.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0,1), got {lam}")
    if iterations == 0:
        return TriSurface(vertices=s.vertices.copy(), triangles=s.triangles)
    edges, _ = edge_counts(s.triangles)
    n = s.n_vertices
    degree = np.zeros(n, dtype=np.float64)
    np.add.at(degree, edges[:, 0], 1.0)
    np.add.at(degree, edges[:, 1], 1.0)
    movable = degree > 0
    if fixed is not None and len(fixed):
        movable[np.asarray(fixed, dtype=np.int64)] = False
    verts = s.vertices.copy()
    for _ in range(iterations):
        acc = np.zeros_like(verts)
        np.add.at(acc, edges[:, 0], verts[edges[:, 1]])
        np.add.at(acc, edges[:, 1], verts[edges[:, 0]])
        centroid = acc[movable] / degree[movable, None]
        verts[movable] += lam * (centroid - verts[movable])
    return TriSurface(vertices=verts, triangles=s.triangles)


def collapse_short_edges(s: TriSurface, min_length: float,
                         max_rounds: int = 20) -> TriSurface:
    """Weld the endpoints of every edge shorter than `min_length`.

    Marching cubes emits arbitrarily short edges wherever the isosurface
    grazes a grid point, and the resulting sliver triangles are fragile in
    downstream layer sweeps.  Each round collapses an independent set of
    short edges (shortest first) to their midpoints; a vertex lying exactly
    on the surface's axial extreme plane wins its merge so flat end caps
    stay planar.  Degenerate triangles and cancelling flap pairs are
    dropped, and unused vertices are compacted away.
    """
    if min_length <= 0:
        raise ValueError(f"min_length must be > 0, got {min_length}")
    verts = s.vertices.copy()
    tris = s.triangles.copy()
    for _ in range(max_rounds):
        edges = np.unique(np.sort(np.concatenate(
            [tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1), axis=0)
        lengths = np.linalg.norm(verts[edges[:, 0]] - verts[edges[:, 1]], axis=1)
        short = np.flatnonzero(lengths < min_length)
        if not len(short):
            break
        z = verts[:, 2]
        z_lo, z_hi = z.min(), z.max()
        taken = np.zeros(len(verts), dtype=bool)
        mapping = np.arange(len(verts))
        for e in short[np.argsort(lengths[short])]:
            a, b = edges[e]
            if taken[a] or taken[b]:
                continue
            taken[a] = taken[b] = True
            a_cap = z[a] == z_lo or z[a] == z_hi
            b_cap = z[b] == z_lo or z[b] == z_hi
            if b_cap and not a_cap:
                verts[a] = verts[b]
            elif not (a_cap and not b_cap):
                verts[a] = 0.5 * (verts[a] + verts[b])
            mapping[b] = a
        tris = mapping[tris]
        tris = tris[(tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2])
                    & (tris[:, 2] != tris[:, 0])]
        key, inverse, counts = np.unique(np.sort(tris, axis=1), axis=0,
                                         return_inverse=True, return_counts=True)
        tris = tris[counts[inverse] == 1]
    used = np.unique(tris)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriSurface(vertices=verts[used], triangles=remap[tris])


def offset_inward(s: TriSurface, t: float) -> TriSurface:
    """Move every vertex a distance t along its inward normal; checks for
    self-intersections afterwards."""
    if t < 0:
        raise ValueError(f"offset distance must be >= 0, got {t}")
    if t == 0:
        return TriSurface(vertices=s.vertices.copy(), triangles=s.triangles)
    normals = vertex_normals(s.vertices, s.triangles)
    verts = s.vertices - t * normals
    out = TriSurface(vertices=verts, triangles=s.triangles)
    pair = find_self_intersection(out)
    if pair is not None:
        raise SelfIntersectionError(*pair)
    return out


# -- triangle/triangle intersection ----------------------------------------

def _project_2d(points: np.ndarray, normal: np.ndarray) -> np.ndarray:
    axis = int(np.argmax(np.abs(normal)))
    keep = [i for i in range(3) if i != axis]
    return points[..., keep]


def _seg_intersect_2d(p1, p2, q1, q2, eps=1e-12) -> bool:
    d1 = p2 - p1
    d2 = q2 - q1
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    rel = q1 - p1
    if abs(denom) < eps:
        return False
    t = (rel[0] * d2[1] - rel[1] * d2[0]) / denom
    u = (rel[0] * d1[1] - rel[1] * d1[0]) / denom
    return -eps <= t <= 1 + eps and -eps <= u <= 1 + eps


def _point_in_tri_2d(p, tri, eps=1e-12) -> bool:
    signs = []
    for k in range(3):
        a, b = tri[k], tri[(k + 1) % 3]
        signs.append((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]))
    return all(v >= -eps for v in signs) or all(v <= eps for v in signs)


def _coplanar_overlap(t1: np.ndarray, t2: np.ndarray, normal: np.ndarray) -> bool:
    a = _project_2d(t1, normal)
    b = _project_2d(t2, normal)
    for i in range(3):
        for j in range(3):
            if _seg_intersect_2d(a[i], a[(i + 1) % 3], b[j], b[(j + 1) % 3]):
                return True
    return _point_in_tri_2d(a[0], b) or _point_in_tri_2d(b[0], a)


def _tri_pair_intersects(t1: np.ndarray, t2: np.ndarray, tol: float = 1e-9) -> bool:
    """Moller-style interval test for one triangle pair (exact up to tol)."""
    n2 = np.cross(t2[1] - t2[0], t2[2] - t2[0])
    d1 = (t1 - t2[0]) @ n2
    eps1 = tol * max(1.0, float(np.abs(d1).max()))
    if np.all(np.abs(d1) <= eps1):
        return _coplanar_overlap(t1, t2, n2)
    if np.all(d1 > eps1) or np.all(d1 < -eps1):
        return False
    n1 = np.cross(t1[1] - t1[0], t1[2] - t1[0])
    d2 = (t2 - t1[0]) @ n1
    eps2 = tol * max(1.0, float(np.abs(d2).max()))
    if np.all(d2 > eps2) or np.all(d2 < -eps2):
        return False

    direction = np.cross(n1, n2)
    axis = int(np.argmax(np.abs(direction)))

    def interval(tri, dist, eps):
        proj = tri[:, axis]
        on = np.flatnonzero(np.abs(dist) <= eps)
        if len(on) >= 2:
            return min(proj[on]), max(proj[on])
        pos = dist > eps
        neg = dist < -eps
        if pos.sum() == 1:
            solo = int(np.flatnonzero(pos)[0])
        elif neg.sum() == 1:
            solo = int(np.flatnonzero(neg)[0])
        else:
            solo = int(on[0])
        others = [k for k in range(3) if k != solo]
        ts = []
        for o in others:
            denom = dist[solo] - dist[o]
            frac = dist[solo] / denom if denom != 0 else 0.0
            ts.append(proj[solo] + (proj[o] - proj[solo]) * frac)
        return min(ts), max(ts)

    lo1, hi1 = interval(t1, d1, eps1)
    lo2, hi2 = interval(t2, d2, eps2)
    return not (hi1 < lo2 - tol or hi2 < lo1 - tol)


def find_self_intersection(s: TriSurface, tol: float = 1e-9) -> tuple[int, int] | None:
    """Return the first pair of non-adjacent intersecting triangles, or None.

    Broad phase: uniform spatial hash on triangle bounding boxes; narrow phase:
    triangle-triangle interval test.
    """
    verts, tris = s.vertices, s.triangles
    nt = len(tris)
    if nt < 2:
        return None
    coords = verts[tris]
    lo = coords.min(axis=1)
    hi = coords.max(axis=1)
    cell = float((hi - lo).max(axis=1).mean()) or 1.0
    cell *= 1.5
    grid: dict[tuple[int, int, int], list[int]] = {}
    ilo = np.floor(lo / cell).astype(np.int64)
    ihi = np.floor(hi / cell).astype(np.int64)
    for t in range(nt):
        for i in range(ilo[t, 0], ihi[t, 0] + 1):
            for j in range(ilo[t, 1], ihi[t, 1] + 1):
                for k in range(ilo[t, 2], ihi[t, 2] + 1):
                    grid.setdefault((i, j, k), []).append(t)

    tri_sets = [frozenset(tri) for tri in tris]
    seen: set[tuple[int, int]] = set()
    candidates: list[tuple[int, int]] = []
    for members in grid.values():
        m = len(members)
        if m < 2:
            continue
        for x in range(m):
            a = members[x]
            for y in range(x + 1, m):
                b = members[y]
                key = (a, b) if a < b else (b, a)
                if key in seen:
                    continue
                seen.add(key)
                if tri_sets[key[0]] & tri_sets[key[1]]:
                    continue  # adjacent triangles legitimately touch
                candidates.append(key)
    if not candidates:
        return None
    cand = np.array(sorted(candidates), dtype=np.int64)
    # bbox overlap rejection
    a, b = cand[:, 0], cand[:, 1]
    ok = np.all(lo[a] <= hi[b] + tol, axis=1) & np.all(lo[b] <= hi[a] + tol, axis=1)
    for i, j in cand[ok]:
        if _tri_pair_intersects(coords[i], coords[j], tol):
            return int(i), int(j)
    return None


def identify_end_rings(s: TriSurface, axis: int = 2,
                       tol: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vertex index sets of the flat caps at the two extremes along `axis`.

    `tol` defaults to half the median edge length (about half a voxel for
    marching-cubes surfaces).  A cap must contain at least 3 vertices and one
    whole triangle inside the tolerance slab whose normal is axis-aligned to
    machine precision — a merely well-subdivided dome (e.g. a sphere pole)
    puts triangles in the slab but never planar ones, and is rejected.
    """
    z = s.vertices[:, axis]
    if tol is None:
        edges, _ = edge_counts(s.triangles)
        lengths = np.linalg.norm(s.vertices[edges[:, 0]] - s.vertices[edges[:, 1]], axis=1)
        tol = 0.5 * float(np.median(lengths))
    sets = []
    for plane, side in ((z.max(), "top"), (z.min(), "bottom")):
        members = np.flatnonzero(np.abs(z - plane) <= tol)
        in_slab = np.isin(s.triangles, members).all(axis=1)
        flat = False
        if len(members) >= 3 and in_slab.any():
            unit, _ = triangle_normals(s.vertices, s.triangles[in_slab])
            flat = bool(np.any(np.abs(unit[:, axis]) >= 1.0 - 1e-9))
        if not flat:
            raise ValueError(f"no flat {side} cap found within {tol:.4g} mm of z={plane:.4g}")
        sets.append(members)
    return sets[0], sets[1]


# -- file writers/readers ----------------------------------------------------

def write_stl(path: str, s: TriSurface) -> None:
    """Binary STL (little-endian, float32 vertices)."""
    unit, _ = triangle_normals(s.vertices, s.triangles)
    tri = s.vertices[s.triangles]
    n = len(tri)
    with open(path, "wb") as fh:
        fh.write(b"aaastress binary stl".ljust(80, b"\0"))
        fh.write(struct.pack("<I", n))
        record = np.zeros((n, 12), dtype="<f4")
        record[:, 0:3] = unit
        record[:, 3:6] = tri[:, 0]
        record[:, 6:9] = tri[:, 1]
        record[:, 9:12] = tri[:, 2]
        blob = np.zeros((n, 50), dtype=np.uint8)
        blob[:, :48] = record.view(np.uint8).reshape(n, 48)
        fh.write(blob.tobytes())


def read_stl(path: str) -> TriSurface:
    """Read a binary STL, merging exactly-equal vertices."""
    with open(path, "rb") as fh:
        header = fh.read(84)
        if len(header) < 84:
            raise ValueError(f"{path}: truncated STL header")
        n = struct.unpack("<I", header[80:84])[0]
        blob = np.frombuffer(fh.read(50 * n), dtype=np.uint8)
    if blob.size != 50 * n:
        raise ValueError(f"{path}: truncated STL payload")
    record = blob.reshape(n, 50)[:, :48].copy().view("<f4").reshape(n, 12)
    corners = record[:, 3:12].reshape(n * 3, 3).astype(np.float64)
    unique, inverse = np.unique(corners, axis=0, return_inverse=True)
    return TriSurface(vertices=unique, triangles=inverse.reshape(n, 3))


def write_vtk_polydata(path: str, s: TriSurface, name: str = "surface") -> None:
    """Legacy-VTK PolyData ASCII with full double precision."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{name}\n")
        fh.write("ASCII\nDATASET POLYDATA\n")
        fh.write(f"POINTS {s.n_vertices} double\n")
        for x, y, z in s.vertices:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        fh.write(f"POLYGONS {s.n_triangles} {4 * s.n_triangles}\n")
        for a, b, c in s.triangles:
            fh.write(f"3 {a} {b} {c}\n")


def read_vtk_polydata(path: str) -> TriSurface:
    with open(path, "r", encoding="ascii") as fh:
        tokens = fh.read().split()
    def find(word):
        for i, tk in enumerate(tokens):
            if tk == word:
                return i
        raise ValueError(f"{path}: missing {word} section")
    p = find("POINTS")
    n = int(tokens[p + 1])
    coords = np.array(tokens[p + 3:p + 3 + 3 * n], dtype=np.float64).reshape(n, 3)
    q = find("POLYGONS")
    m = int(tokens[q + 1])
    body = np.array(tokens[q + 3:q + 3 + 4 * m], dtype=np.int64).reshape(m, 4)
    if not np.all(body[:, 0] == 3):
        raise ValueError(f"{path}: POLYGONS contains non-triangle cells")
    return TriSurface(vertices=coords, triangles=body[:, 1:])
