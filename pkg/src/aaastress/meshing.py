"""Layered quadratic tetrahedral meshing of wall + thrombus between two surfaces.

The mesh is swept column-wise: every side vertex of the (closed) exterior
surface casts a ray along its inward normal to the inner (lumen) surface;
wall nodes subdivide the first `thickness` millimetres of the ray, thrombus
nodes subdivide the remaining gap.  Prism columns are split into tetrahedra
with a globally consistent diagonal rule and elevated to 10-node elements.

Element node order (also the legacy-VTK type-24 and C3D10 order): 4 corners,
then mid-edge nodes on edges (0,1), (1,2), (2,0), (0,3), (1,3), (2,3).
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .surface import TriSurface, identify_end_rings, vertex_normals

WALL = 1
ILT = 2
REGION_NAMES = {WALL: "WALL", ILT: "ILT"}

_EDGE_ORDER = np.array([(0, 1), (1, 2), (2, 0), (0, 3), (1, 3), (2, 3)], dtype=np.int64)

# local 6-node faces of a 10-node tet: 3 corners + the mids between them,
# wound so the normal points away from the remaining corner
_TET_FACES = np.array([
    (0, 2, 1, 6, 5, 4),
    (0, 1, 3, 4, 8, 7),
    (1, 2, 3, 5, 9, 8),
    (2, 0, 3, 6, 7, 9),
], dtype=np.int64)


class MeshingError(RuntimeError):
    pass


class InvertedElementError(MeshingError):
    def __init__(self, element_ids):
        ids = [int(e) for e in np.atleast_1d(element_ids)[:20]]
        super().__init__(f"non-positive Jacobian in elements {ids}")
        self.element_ids = ids


@dataclasses.dataclass(frozen=True)
class MeshColumns:
    """Through-thickness bookkeeping: which exterior-surface vertex generated
    each node, and at which wall-layer levels (corner nodes have equal pair
    entries; mid-edge nodes carry both parents)."""

    gen_vertices: np.ndarray   # (N,2) int32
    levels: np.ndarray         # (N,2) float64 layer indices
    wall_layers: int

    def wall_node_mask(self) -> np.ndarray:
        return self.levels.max(axis=1) <= self.wall_layers + 1e-9

    def save(self, path: str) -> None:
        np.savez_compressed(path, gen_vertices=self.gen_vertices, levels=self.levels,
                            wall_layers=np.int64(self.wall_layers))

    @staticmethod
    def load(path: str) -> "MeshColumns":
        with np.load(path) as blob:
            return MeshColumns(gen_vertices=blob["gen_vertices"], levels=blob["levels"],
                               wall_layers=int(blob["wall_layers"]))


@dataclasses.dataclass
class TetMesh:
    """Quadratic tetrahedral mesh with region tags and named node/face sets."""

    nodes: np.ndarray            # (N,3) float64 mm
    elements: np.ndarray         # (M,10) int
    regions: np.ndarray          # (M,) uint8, WALL or ILT
    top_nodes: np.ndarray        # (.,) int
    bottom_nodes: np.ndarray     # (.,) int
    luminal_faces: np.ndarray    # (F,6) int, normals point into the cavity
    interface_faces: np.ndarray  # (F2,6) int, normals point from wall into ILT
    columns: MeshColumns | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def element_count(self, region: int) -> int:
        return int(np.count_nonzero(self.regions == region))

    def node_region_mask(self, region: int) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        els = self.elements[self.regions == region]
        if len(els):
            mask[np.unique(els)] = True
        return mask


@dataclasses.dataclass(frozen=True)
class QualityReport:
    min_scaled_jacobian: float
    max_aspect_ratio: float
    element_counts: dict
    node_count: int


# ---------------------------------------------------------------------------
# prism -> tet splitting
# ---------------------------------------------------------------------------

# Orientation-preserving prism symmetries (bottom b0 b1 b2, top t0 t1 t2);
# row p maps the vertex at position p to position 0.
_PRISM_PERMS = np.array([
    (0, 1, 2, 3, 4, 5),
    (1, 2, 0, 4, 5, 3),
    (2, 0, 1, 5, 3, 4),
    (3, 5, 4, 0, 2, 1),
    (4, 3, 5, 1, 0, 2),
    (5, 4, 3, 2, 1, 0),
], dtype=np.int64)


def prisms_to_tets(prisms: np.ndarray) -> np.ndarray:
    """Split prisms (corner order bottom triangle then top triangle) into 3 tets each.

    The diagonal on every quad face runs through the quad's lowest global
    vertex index, so adjacent prisms always agree on shared faces.  Accepts a
    single 6-tuple or an (n, 6) array; returns (3, 4) or (n*3, 4).
    """
    arr = np.asarray(prisms, dtype=np.int64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != 6:
        raise ValueError(f"prisms must have 6 corners, got shape {arr.shape}")
    pos = np.argmin(arr, axis=1)
    canon = np.take_along_axis(arr, _PRISM_PERMS[pos], axis=1)
    v0, v1, v2, v3, v4, v5 = (canon[:, k] for k in range(6))
    use_15 = np.minimum(v1, v5) < np.minimum(v2, v4)
    n = len(arr)
    tets = np.empty((n, 3, 4), dtype=np.int64)
    # diagonal (v1, v5) on the far quad
    tets[use_15, 0] = np.stack([v0, v1, v2, v5], axis=1)[use_15]
    tets[use_15, 1] = np.stack([v0, v1, v5, v4], axis=1)[use_15]
    # diagonal (v2, v4)
    tets[~use_15, 0] = np.stack([v0, v1, v2, v4], axis=1)[~use_15]
    tets[~use_15, 1] = np.stack([v0, v4, v2, v5], axis=1)[~use_15]
    tets[:, 2] = np.stack([v0, v4, v5, v3], axis=1)
    out = tets.reshape(n * 3, 4)
    return out[:3].reshape(3, 4) if single and n == 1 else out


# ---------------------------------------------------------------------------
# layered sweep
# ---------------------------------------------------------------------------

def _ray_cast_distances(origins: np.ndarray, directions: np.ndarray,
                        target: TriSurface, chunk: int = 48) -> np.ndarray:
    """Nearest positive ray/triangle intersection distance per origin (inf = miss)."""
    tri = target.vertices[target.triangles]
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    n = len(origins)
    best = np.full(n, np.inf)
    eps = 1e-12
    for start in range(0, n, chunk):
        o = origins[start:start + chunk][:, None, :]
        d = directions[start:start + chunk][:, None, :]
        pvec = np.cross(d, e2[None, :, :])
        det = np.einsum("ctk,tk->ct", pvec, e1)
        valid = np.abs(det) > eps
        inv = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)
        tvec = o - v0[None, :, :]
        u = np.einsum("ctk,ctk->ct", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("ctk,ctk->ct", qvec, np.broadcast_to(d, qvec.shape)) * inv
        t = np.einsum("ctk,tk->ct", qvec, e2) * inv
        hit = valid & (u >= -1e-9) & (v >= -1e-9) & (u + v <= 1.0 + 1e-9) & (t > 1e-9)
        t = np.where(hit, t, np.inf)
        best[start:start + chunk] = t.min(axis=1)
    return best


def _affine_smoother(points: np.ndarray, edges: np.ndarray,
                     n_vertices: int) -> sparse.csr_matrix:
    """Sparse operator replacing each vertex value by its local affine
    (moving least-squares) fit over the one-ring plus itself.

    Affine reproduction is the point: a field that varies linearly with
    position passes through unchanged, so repeated application removes
    neighbour-scale zigzag without the systematic drift plain averaging
    accumulates wherever the adjacency is one-sided (e.g. swept-surface
    rims, where every interior vertex has balanced diagonals but rim
    vertices do not)."""
    idx = np.arange(n_vertices)
    tgt = np.concatenate([edges[:, 0], edges[:, 1], idx])
    nbr = np.concatenate([edges[:, 1], edges[:, 0], idx])
    d = points[nbr] - points[tgt]
    moments = np.zeros((n_vertices, 4, 4))
    basis = np.column_stack([np.ones(len(d)), d])
    for a in range(4):
        for b in range(a, 4):
            acc = np.bincount(tgt, weights=basis[:, a] * basis[:, b],
                              minlength=n_vertices)
            moments[:, a, b] = acc
            moments[:, b, a] = acc
    # Ridge on the gradient block: locally flat/collinear neighbourhoods make
    # the fit underdetermined; constants are still reproduced exactly.
    trace = moments[:, 1, 1] + moments[:, 2, 2] + moments[:, 3, 3]
    ridge = 1e-6 * trace / 3.0 + 1e-30
    moments[:, range(1, 4), range(1, 4)] += ridge[:, None]
    inv_row = np.linalg.inv(moments)[:, 0, :]
    weights = inv_row[tgt, 0] + np.einsum("ej,ej->e", inv_row[tgt, 1:], d)
    return sparse.csr_matrix((weights, (tgt, nbr)),
                             shape=(n_vertices, n_vertices))


def _untangle_interior(mesh: "TetMesh", movable: np.ndarray, planar: np.ndarray,
                       mid_pairs: np.ndarray, n_corner: int,
                       shell_edges: np.ndarray | None = None,
                       rounds: int = 50) -> np.ndarray:
    """Resolve residual inverted elements by nudging a few corner nodes.

    Sweeping columns toward a narrowing, grooved inner surface converges them
    circumferentially, and a handful can land with their deepest endpoints
    almost collinear or crossed by a hair.  Each round relaxes (a) the
    deepest-layer nodes of inverted elements toward their same-layer
    neighbours over `shell_edges`, restoring tangential spacing, and (b) the
    `movable` interior-layer corners toward their tet-edge neighbourhood
    centroid.  `planar` corners keep their axial coordinate so flat end caps
    stay flat, and every mid-edge node is refreshed to its corner midpoint.
    The best state seen is kept.  Returns the element ids still inverted when
    the budget runs out (empty on success)."""
    bad = np.flatnonzero(corner_jacobians(mesh).min(axis=1) <= 0)
    if not len(bad):
        return bad
    corners = mesh.elements[:, :4]
    edges = np.unique(np.sort(corners[:, _EDGE_ORDER], axis=2).reshape(-1, 2), axis=0)
    deg = np.bincount(edges.ravel(), minlength=n_corner).astype(np.float64)
    if shell_edges is None or not len(shell_edges):
        shell_deg = np.zeros(n_corner)
    else:
        shell_deg = np.bincount(shell_edges.ravel(), minlength=n_corner
                                ).astype(np.float64)
    nodes = mesh.nodes
    best = (len(bad), nodes.copy())

    def relax(sel, graph_edges, graph_deg):
        if not len(sel):
            return
        acc = np.zeros((n_corner, 3))
        np.add.at(acc, graph_edges[:, 0], nodes[graph_edges[:, 1]])
        np.add.at(acc, graph_edges[:, 1], nodes[graph_edges[:, 0]])
        moved = 0.5 * (nodes[sel] + acc[sel] / graph_deg[sel, None])
        keep_z = planar[sel]
        moved[keep_z, 2] = nodes[sel[keep_z], 2]
        nodes[sel] = moved

    for _ in range(rounds):
        sel_mask = np.zeros(n_corner, dtype=bool)
        sel_mask[np.unique(corners[bad])] = True
        ring = np.zeros(n_corner, dtype=bool)
        ring[edges[sel_mask[edges[:, 0]], 1]] = True
        ring[edges[sel_mask[edges[:, 1]], 0]] = True
        grown = sel_mask | ring
        relax(np.flatnonzero(grown & (shell_deg > 0)), shell_edges, shell_deg)
        relax(np.flatnonzero(grown & movable), edges, deg)
        nodes[n_corner:] = 0.5 * (nodes[mid_pairs[:, 0]] + nodes[mid_pairs[:, 1]])
        bad = np.flatnonzero(corner_jacobians(mesh).min(axis=1) <= 0)
        if len(bad) < best[0]:
            best = (len(bad), nodes.copy())
        if not len(bad):
            break
    if len(bad) > best[0]:
        nodes[:] = best[1]
        bad = np.flatnonzero(corner_jacobians(mesh).min(axis=1) <= 0)
    return bad


def _smooth_vertex_field(values: np.ndarray, points: np.ndarray,
                         edges: np.ndarray, iterations: int,
                         lam: float = 0.5) -> np.ndarray:
    """Relax a per-vertex field toward its local affine fit.  Vertices with
    no incident edges are returned unchanged."""
    vals = values.astype(np.float64, copy=True)
    if iterations <= 0 or not len(edges):
        return vals
    n_vertices = len(points)
    smoother = _affine_smoother(points, edges, n_vertices)
    flat = vals.reshape(n_vertices, -1)
    for _ in range(iterations):
        flat += lam * (smoother @ flat - flat)
    return vals


def build_layered_mesh(wall_ext: TriSurface, lumen: TriSurface, thickness: float,
                       wall_layers: int = 2, ilt_layers: int = 4,
                       sliver_min: float = 0.05,
                       cap_tol: float | None = None,
                       direction_smoothing: int = 10,
                       gap_smoothing: int = 5) -> TetMesh:
    """Sweep the exterior surface inward into a conforming wall + ILT mesh.

    Where a vertex's lumen distance leaves a gap of at most `sliver_min`
    beyond the wall thickness, the column is in wall/lumen contact and no ILT
    elements are generated for triangles touching it.

    `direction_smoothing` relaxes the per-vertex sweep directions over the
    surface graph before ray casting, and `gap_smoothing` relaxes the swept
    depths afterwards.  Voxel-derived isosurfaces keep stair-step normals and
    a grooved inner surface; sweeping raw directions several millimetres
    makes neighbouring columns cross.  Both passes reproduce locally affine
    fields exactly, so smooth analytic geometry is untouched.
    """
    if wall_layers < 2:
        raise ValueError(f"wall_layers must be >= 2, got {wall_layers}")
    if ilt_layers < 1:
        raise ValueError(f"ilt_layers must be >= 1, got {ilt_layers}")
    if thickness <= 0:
        raise ValueError(f"thickness must be > 0, got {thickness}")

    top_set, bottom_set = identify_end_rings(wall_ext, tol=cap_tol)
    nv = wall_ext.n_vertices
    in_top = np.zeros(nv, dtype=bool)
    in_top[top_set] = True
    in_bottom = np.zeros(nv, dtype=bool)
    in_bottom[bottom_set] = True

    tris = wall_ext.triangles
    cap_tri = in_top[tris].all(axis=1) | in_bottom[tris].all(axis=1)
    side = tris[~cap_tri]
    if not len(side):
        raise MeshingError("exterior surface has no side triangles outside its end caps")

    # inward directions from side-only normals (rim rays stay radial)
    outward = vertex_normals(wall_ext.vertices, side)
    used = np.unique(side)
    inward = -outward

    def _pin_rim_to_cap_plane(vec: np.ndarray) -> np.ndarray:
        # Voxel staircases give rim normals an axis component; a ray tilted
        # out of the end slab can slip past the inner surface's cap and sweep
        # its column to a nonsense depth.  Keep rim rays inside the cap plane,
        # falling back to "toward the ring centroid" for near-vertical normals.
        for members in (top_set, bottom_set):
            sub = vec[members].copy()
            sub[:, 2] = 0.0
            norms = np.linalg.norm(sub, axis=1)
            flat = norms <= 1e-9
            if flat.any():
                centre = wall_ext.vertices[members].mean(axis=0)
                repl = centre - wall_ext.vertices[members][flat]
                repl[:, 2] = 0.0
                sub[flat] = repl
                norms = np.linalg.norm(sub, axis=1)
            vec[members] = sub / np.where(norms > 1e-12, norms, 1.0)[:, None]
        return vec

    inward = _pin_rim_to_cap_plane(inward)
    edge_pairs = np.unique(np.sort(np.concatenate(
        [side[:, [0, 1]], side[:, [1, 2]], side[:, [2, 0]]]), axis=1), axis=0)
    if direction_smoothing:
        inward = _smooth_vertex_field(inward, wall_ext.vertices, edge_pairs,
                                      direction_smoothing)
        norms = np.linalg.norm(inward, axis=1)
        ok = norms > 1e-12
        inward[ok] /= norms[ok, None]
        inward[~ok] = -outward[~ok]   # degenerate average: keep the raw normal
        inward = _pin_rim_to_cap_plane(inward)

    dist = np.full(nv, np.inf)
    dist[used] = _ray_cast_distances(wall_ext.vertices[used], inward[used], lumen)
    missed = used[~np.isfinite(dist[used])]
    if len(missed):
        tree = cKDTree(lumen.vertices)
        d, _ = tree.query(wall_ext.vertices[missed], k=1)
        dist[missed] = d
        bad = missed[~np.isfinite(dist[missed]) | (dist[missed] <= 0)]
        if len(bad):
            raise MeshingError(
                f"no inward ray hit and no nearest-point fallback for vertex {int(bad[0])}")

    gap = np.maximum(dist - thickness, 0.0)
    if gap_smoothing:
        finite = np.where(np.isfinite(gap), gap, 0.0)
        gap = _smooth_vertex_field(finite, wall_ext.vertices, edge_pairs,
                                   gap_smoothing)
        np.maximum(gap, 0.0, out=gap)
    contact = gap <= sliver_min
    ilt_tri_mask = ~contact[side].any(axis=1)
    ilt_side = side[ilt_tri_mask]
    has_ilt_col = np.zeros(nv, dtype=bool)
    if len(ilt_side):
        has_ilt_col[np.unique(ilt_side)] = True

    n_lev = wall_layers + 1 + ilt_layers
    used_mask = np.zeros(nv, dtype=bool)
    used_mask[used] = True
    level_used = np.zeros((nv, n_lev), dtype=bool)
    level_used[used_mask, :wall_layers + 1] = True
    level_used[has_ilt_col, wall_layers + 1:] = True

    # level distances along each vertex ray
    level_dist = np.zeros((nv, n_lev))
    for k in range(wall_layers + 1):
        level_dist[:, k] = thickness * k / wall_layers
    for j in range(1, ilt_layers + 1):
        level_dist[:, wall_layers + j] = thickness + gap * j / ilt_layers

    prov = np.flatnonzero(level_used.ravel())          # provisional ids, sorted
    remap = np.full(nv * n_lev, -1, dtype=np.int64)
    remap[prov] = np.arange(len(prov))
    gen_vertex = prov // n_lev
    gen_level = prov % n_lev
    corner_xyz = (wall_ext.vertices[gen_vertex]
                  + inward[gen_vertex] * level_dist[gen_vertex, gen_level][:, None])

    def node_id(vids, level):
        return remap[vids * n_lev + level]

    # prism columns; bottom triangles re-wound (a, c, b) so their normals face
    # the next (inner) level, which keeps all tets positively oriented
    prism_blocks = []
    region_blocks = []
    a, b, c = side[:, 0], side[:, 2], side[:, 1]   # reversed winding
    for k in range(wall_layers):
        prism_blocks.append(np.stack([
            node_id(a, k), node_id(b, k), node_id(c, k),
            node_id(a, k + 1), node_id(b, k + 1), node_id(c, k + 1)], axis=1))
        region_blocks.append(np.full(len(side), WALL, dtype=np.uint8))
    ia, ib, ic = ilt_side[:, 0], ilt_side[:, 2], ilt_side[:, 1]
    for j in range(ilt_layers):
        k0, k1 = wall_layers + j, wall_layers + j + 1
        prism_blocks.append(np.stack([
            node_id(ia, k0), node_id(ib, k0), node_id(ic, k0),
            node_id(ia, k1), node_id(ib, k1), node_id(ic, k1)], axis=1))
        region_blocks.append(np.full(len(ilt_side), ILT, dtype=np.uint8))
    prisms = np.concatenate(prism_blocks)
    prism_regions = np.concatenate(region_blocks)

    tets = prisms_to_tets(prisms)
    regions = np.repeat(prism_regions, 3)

    # quadratic elevation: shared mid-edge nodes via unique sorted corner pairs
    pairs = np.sort(tets[:, _EDGE_ORDER], axis=2).reshape(-1, 2)
    unique_pairs, inverse = np.unique(pairs, axis=0, return_inverse=True)
    n_corner = len(prov)
    mids = n_corner + inverse.reshape(len(tets), 6)
    elements = np.concatenate([tets, mids], axis=1)
    mid_xyz = 0.5 * (corner_xyz[unique_pairs[:, 0]] + corner_xyz[unique_pairs[:, 1]])
    nodes = np.concatenate([corner_xyz, mid_xyz])

    # column bookkeeping for every node
    gv = np.concatenate([np.stack([gen_vertex, gen_vertex], axis=1),
                         gen_vertex[unique_pairs]]).astype(np.int32)
    lv = np.concatenate([np.stack([gen_level, gen_level], axis=1),
                         gen_level[unique_pairs]]).astype(np.float64)
    columns = MeshColumns(gen_vertices=gv, levels=lv, wall_layers=wall_layers)

    # named node sets: whole columns under the cap vertex sets
    node_top = in_top[gv[:, 0]] & in_top[gv[:, 1]]
    node_bottom = in_bottom[gv[:, 0]] & in_bottom[gv[:, 1]]
    top_nodes = np.flatnonzero(node_top)
    bottom_nodes = np.flatnonzero(node_bottom)

    # face sets (6-node faces, normals pointing away from the material they bound)
    pair_key = unique_pairs[:, 0] * (n_corner + 1) + unique_pairs[:, 1]

    def mid_lookup(n1, n2):
        lo = np.minimum(n1, n2)
        hi = np.maximum(n1, n2)
        idx = np.searchsorted(pair_key, lo * (n_corner + 1) + hi)
        return n_corner + idx

    def level_face(tri_abc, level):
        # face (a, c, b) at a given level: normal continues inward
        fa = node_id(tri_abc[:, 0], level)
        fc = node_id(tri_abc[:, 2], level)
        fb = node_id(tri_abc[:, 1], level)
        return np.stack([fa, fc, fb,
                         mid_lookup(fa, fc), mid_lookup(fc, fb), mid_lookup(fb, fa)], axis=1)

    luminal_parts = []
    if len(ilt_side):
        luminal_parts.append(level_face(ilt_side, wall_layers + ilt_layers))
    contact_side = side[~ilt_tri_mask]
    if len(contact_side):
        luminal_parts.append(level_face(contact_side, wall_layers))
    luminal_faces = (np.concatenate(luminal_parts) if luminal_parts
                     else np.empty((0, 6), dtype=np.int64))
    interface_faces = (level_face(ilt_side, wall_layers) if len(ilt_side)
                       else np.empty((0, 6), dtype=np.int64))

    mesh = TetMesh(nodes=nodes, elements=elements, regions=regions,
                   top_nodes=top_nodes, bottom_nodes=bottom_nodes,
                   luminal_faces=luminal_faces, interface_faces=interface_faces,
                   columns=columns)
    movable = (has_ilt_col[gen_vertex]
               & (gen_level > wall_layers)
               & (gen_level < wall_layers + ilt_layers))
    planar = in_top[gen_vertex] | in_bottom[gen_vertex]
    both_ilt = has_ilt_col[edge_pairs[:, 0]] & has_ilt_col[edge_pairs[:, 1]]
    shell_edges = np.stack(
        [node_id(edge_pairs[both_ilt, 0], wall_layers + ilt_layers),
         node_id(edge_pairs[both_ilt, 1], wall_layers + ilt_layers)], axis=1)
    bad = _untangle_interior(mesh, movable, planar, unique_pairs, n_corner,
                             shell_edges)
    if len(bad):
        raise InvertedElementError(bad)
    return mesh


def drop_region(mesh: TetMesh, region: int) -> TetMesh:
    """Remove all elements of one region, compacting nodes and remapping sets."""
    keep = mesh.regions != region
    if keep.all():
        return mesh
    elements = mesh.elements[keep]
    used = np.unique(elements)
    remap = np.full(mesh.n_nodes, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))

    def remap_nodes(idx):
        idx = remap[idx]
        return idx[idx >= 0]

    def remap_faces(faces):
        if not len(faces):
            return np.empty((0, 6), dtype=np.int64)
        mapped = remap[faces]
        ok = (mapped >= 0).all(axis=1)
        return mapped[ok]

    columns = None
    if mesh.columns is not None:
        columns = MeshColumns(gen_vertices=mesh.columns.gen_vertices[used],
                              levels=mesh.columns.levels[used],
                              wall_layers=mesh.columns.wall_layers)
    return TetMesh(nodes=mesh.nodes[used], elements=remap[elements],
                   regions=mesh.regions[keep],
                   top_nodes=remap_nodes(mesh.top_nodes),
                   bottom_nodes=remap_nodes(mesh.bottom_nodes),
                   luminal_faces=remap_faces(mesh.luminal_faces),
                   interface_faces=remap_faces(mesh.interface_faces),
                   columns=columns)


# ---------------------------------------------------------------------------
# quality
# ---------------------------------------------------------------------------

_CORNER_TARGETS = ((1, 2, 3), (2, 0, 3), (0, 1, 3), (0, 2, 1))


def corner_jacobians(mesh: TetMesh) -> np.ndarray:
    """Scaled Jacobian at each of the 4 corners (sqrt(2)-normalized: the
    regular tetrahedron scores exactly 1)."""
    x = mesh.nodes[mesh.elements[:, :4]]
    out = np.empty((mesh.n_elements, 4))
    for k, (i, j, l) in enumerate(_CORNER_TARGETS):
        e1 = x[:, i] - x[:, k]
        e2 = x[:, j] - x[:, k]
        e3 = x[:, l] - x[:, k]
        det = np.einsum("ek,ek->e", np.cross(e1, e2), e3)
        denom = (np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
                 * np.linalg.norm(e3, axis=1))
        out[:, k] = np.sqrt(2.0) * det / np.maximum(denom, 1e-300)
    return out


def element_volumes(mesh: TetMesh) -> np.ndarray:
    x = mesh.nodes[mesh.elements[:, :4]]
    det = np.einsum("ek,ek->e", np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]),
                    x[:, 3] - x[:, 0])
    return det / 6.0


def aspect_ratios(mesh: TetMesh) -> np.ndarray:
    """max edge length / (2*sqrt(6) * inradius); 1.0 for the regular tet."""
    x = mesh.nodes[mesh.elements[:, :4]]
    edges = x[:, _EDGE_ORDER[:, 0]] - x[:, _EDGE_ORDER[:, 1]]
    max_edge = np.linalg.norm(edges, axis=2).max(axis=1)
    vol = np.abs(element_volumes(mesh))
    area = np.zeros(mesh.n_elements)
    for (i, j, k) in ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)):
        area += 0.5 * np.linalg.norm(np.cross(x[:, j] - x[:, i], x[:, k] - x[:, i]), axis=1)
    inradius = 3.0 * vol / np.maximum(area, 1e-300)
    return max_edge / (2.0 * np.sqrt(6.0) * np.maximum(inradius, 1e-300))


def quality_check(mesh: TetMesh) -> QualityReport:
    """Corner scaled-Jacobian / aspect-ratio summary; errors on inverted elements."""
    sj = corner_jacobians(mesh)
    min_per_element = sj.min(axis=1)
    bad = np.flatnonzero(min_per_element <= 0)
    if len(bad):
        raise InvertedElementError(bad)
    counts = {REGION_NAMES[r]: mesh.element_count(r) for r in (WALL, ILT)}
    return QualityReport(min_scaled_jacobian=float(min_per_element.min()),
                         max_aspect_ratio=float(aspect_ratios(mesh).max()),
                         element_counts=counts,
                         node_count=mesh.n_nodes)


# ---------------------------------------------------------------------------
# file IO: legacy-VTK unstructured grid and solver deck
# ---------------------------------------------------------------------------

def write_vtk_ugrid(path: str, mesh: TetMesh,
                    point_data: dict[str, np.ndarray] | None = None) -> None:
    """Legacy-VTK ASCII unstructured grid (cell type 24) with the region as
    cell data, named sets as FIELD arrays, and optional point-data scalars."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("quadratic tetrahedral mesh\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        np.savetxt(fh, mesh.nodes, fmt="%.17g", delimiter=" ")
        m = mesh.n_elements
        fh.write(f"CELLS {m} {m * 11}\n")
        cells = np.concatenate([np.full((m, 1), 10, dtype=np.int64), mesh.elements], axis=1)
        np.savetxt(fh, cells, fmt="%d", delimiter=" ")
        fh.write(f"CELL_TYPES {m}\n")
        np.savetxt(fh, np.full(m, 24, dtype=np.int64)[:, None], fmt="%d")
        fh.write(f"CELL_DATA {m}\n")
        fh.write("SCALARS region int 1\nLOOKUP_TABLE default\n")
        np.savetxt(fh, mesh.regions[:, None], fmt="%d")
        sets = {
            "top_nodes": (np.asarray(mesh.top_nodes, dtype=np.int64).reshape(-1, 1), 1),
            "bottom_nodes": (np.asarray(mesh.bottom_nodes, dtype=np.int64).reshape(-1, 1), 1),
            "luminal_faces": (np.asarray(mesh.luminal_faces, dtype=np.int64).reshape(-1, 6), 6),
            "interface_faces": (np.asarray(mesh.interface_faces,
                                           dtype=np.int64).reshape(-1, 6), 6),
        }
        fh.write(f"FIELD mesh_sets {len(sets)}\n")
        for name, (arr, comps) in sets.items():
            fh.write(f"{name} {comps} {len(arr)} int\n")
            if len(arr):
                np.savetxt(fh, arr, fmt="%d", delimiter=" ")
        if point_data:
            fh.write(f"POINT_DATA {mesh.n_nodes}\n")
            for name, values in point_data.items():
                values = np.asarray(values, dtype=np.float64)
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                np.savetxt(fh, values[:, None], fmt="%.17g")


def read_vtk_ugrid(path: str) -> tuple[TetMesh, dict[str, np.ndarray]]:
    with open(path, "r", encoding="ascii") as fh:
        tokens = fh.read().split()
    pos = {}
    for i, tk in enumerate(tokens):
        if tk in ("POINTS", "CELLS", "CELL_TYPES", "CELL_DATA", "FIELD", "POINT_DATA",
                  "SCALARS") and (tk, 0) not in pos:
            pos.setdefault(tk, i)
    if "POINTS" not in pos or "CELLS" not in pos:
        raise ValueError(f"{path}: not a legacy-VTK unstructured grid")
    i = pos["POINTS"]
    n = int(tokens[i + 1])
    nodes = np.array(tokens[i + 3:i + 3 + 3 * n], dtype=np.float64).reshape(n, 3)
    i = pos["CELLS"]
    m = int(tokens[i + 1])
    body = np.array(tokens[i + 3:i + 3 + 11 * m], dtype=np.int64).reshape(m, 11)
    if not np.all(body[:, 0] == 10):
        raise ValueError(f"{path}: expected 10-node cells")
    elements = body[:, 1:]
    if elements.min(initial=0) < 0 or elements.max(initial=-1) >= n:
        raise ValueError(f"{path}: dangling node index in connectivity")
    i = pos["CELL_TYPES"]
    types = np.array(tokens[i + 2:i + 2 + m], dtype=np.int64)
    if not np.all(types == 24):
        raise ValueError(f"{path}: expected VTK cell type 24 (quadratic tetrahedron)")

    regions = np.full(m, WALL, dtype=np.uint8)
    sets = {"top_nodes": np.empty(0, dtype=np.int64),
            "bottom_nodes": np.empty(0, dtype=np.int64),
            "luminal_faces": np.empty((0, 6), dtype=np.int64),
            "interface_faces": np.empty((0, 6), dtype=np.int64)}
    point_data: dict[str, np.ndarray] = {}
    idx = 0
    while idx < len(tokens):
        tk = tokens[idx]
        if tk == "SCALARS":
            name = tokens[idx + 1]
            count = m if name == "region" else n
            start = idx + 6  # SCALARS name type 1 LOOKUP_TABLE default
            data = np.array(tokens[start:start + count], dtype=np.float64)
            if name == "region":
                regions = data.astype(np.uint8)
            else:
                point_data[name] = data
            idx = start + count
        elif tk == "FIELD":
            narr = int(tokens[idx + 2])
            idx += 3
            for _ in range(narr):
                name, comps, tuples = tokens[idx], int(tokens[idx + 1]), int(tokens[idx + 2])
                idx += 4  # name comps tuples dtype
                data = np.array(tokens[idx:idx + comps * tuples], dtype=np.int64)
                idx += comps * tuples
                if name in sets:
                    shaped = data.reshape(tuples, comps)
                    sets[name] = shaped[:, 0] if comps == 1 else shaped
                    if (len(data) and (data.min() < 0 or data.max() >= n)):
                        raise ValueError(f"{path}: dangling node index in set {name}")
        else:
            idx += 1
    mesh = TetMesh(nodes=nodes, elements=elements, regions=regions,
                   top_nodes=np.asarray(sets["top_nodes"], dtype=np.int64).ravel(),
                   bottom_nodes=np.asarray(sets["bottom_nodes"], dtype=np.int64).ravel(),
                   luminal_faces=np.asarray(sets["luminal_faces"],
                                            dtype=np.int64).reshape(-1, 6),
                   interface_faces=np.asarray(sets["interface_faces"],
                                              dtype=np.int64).reshape(-1, 6),
                   columns=None)
    return mesh, point_data


# Abaqus-style face numbering for 10-node tets (0-based local corner triples)
_DECK_FACES = {1: (0, 1, 2), 2: (0, 3, 1), 3: (1, 3, 2), 4: (2, 3, 0)}


def _face_owner_table(mesh: TetMesh) -> dict[tuple, list[tuple[int, int]]]:
    table: dict[tuple, list[tuple[int, int]]] = {}
    corners = mesh.elements[:, :4]
    for code, (i, j, k) in _DECK_FACES.items():
        for e in range(mesh.n_elements):
            key = tuple(sorted((int(corners[e, i]), int(corners[e, j]), int(corners[e, k]))))
            table.setdefault(key, []).append((e, code))
    return table


def write_solver_deck(path: str, mesh: TetMesh, title: str = "layered wall model") -> None:
    """Quadratic-tet solver input deck: C3D10H elements, node sets, surfaces."""
    owners = _face_owner_table(mesh)

    def surface_lines(faces):
        lines = []
        for face in np.asarray(faces, dtype=np.int64):
            key = tuple(sorted(int(v) for v in face[:3]))
            cands = owners.get(key, [])
            if not cands:
                raise ValueError("face set references a face not present in any element")
            # prefer the wall-side owner for shared (interface) faces
            cands = sorted(cands, key=lambda ec: (mesh.regions[ec[0]] != WALL, ec[0]))
            e, code = cands[0]
            lines.append(f"{e + 1}, S{code}")
        return lines

    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"*HEADING\n{title}\n")
        fh.write("*NODE\n")
        for i, (x, y, z) in enumerate(mesh.nodes, start=1):
            fh.write(f"{i}, {x:.17g}, {y:.17g}, {z:.17g}\n")
        for region in (WALL, ILT):
            ids = np.flatnonzero(mesh.regions == region)
            if not len(ids):
                continue
            fh.write(f"*ELEMENT, TYPE=C3D10H, ELSET={REGION_NAMES[region]}\n")
            for e in ids:
                conn = ", ".join(str(int(v) + 1) for v in mesh.elements[e])
                fh.write(f"{e + 1}, {conn}\n")
        for name, ids in (("TOP", mesh.top_nodes), ("BOTTOM", mesh.bottom_nodes)):
            fh.write(f"*NSET, NSET={name}\n")
            ids = np.asarray(ids, dtype=np.int64) + 1
            for start in range(0, len(ids), 16):
                fh.write(", ".join(str(int(v)) for v in ids[start:start + 16]) + "\n")
        for name, faces in (("LUMINAL", mesh.luminal_faces),
                            ("INTERFACE", mesh.interface_faces)):
            fh.write(f"*SURFACE, NAME={name}, TYPE=ELEMENT\n")
            for line in surface_lines(faces):
                fh.write(line + "\n")


def read_solver_deck(path: str) -> TetMesh:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    node_ids: list[int] = []
    coords: list[list[float]] = []
    element_rows: list[list[int]] = []
    element_regions: list[int] = []
    nsets: dict[str, list[int]] = {"TOP": [], "BOTTOM": []}
    surfaces: dict[str, list[tuple[int, int]]] = {"LUMINAL": [], "INTERFACE": []}
    section = None
    target = None
    for ln in lines:
        if ln.startswith("*"):
            upper = ln.upper()
            opts = {}
            for part in upper.split(",")[1:]:
                if "=" in part:
                    k, v = part.split("=", 1)
                    opts[k.strip()] = v.strip()
            if upper.startswith("*NODE"):
                section = "node"
            elif upper.startswith("*ELEMENT"):
                section = "element"
                name = opts.get("ELSET", "WALL")
                target = WALL if name == "WALL" else ILT
            elif upper.startswith("*NSET"):
                section = "nset"
                target = opts.get("NSET", "")
                nsets.setdefault(target, [])
            elif upper.startswith("*SURFACE"):
                section = "surface"
                target = opts.get("NAME", "")
                surfaces.setdefault(target, [])
            else:
                section = None
            continue
        parts = [p.strip() for p in ln.split(",") if p.strip()]
        if section == "node":
            node_ids.append(int(parts[0]))
            coords.append([float(parts[1]), float(parts[2]), float(parts[3])])
        elif section == "element":
            element_rows.append([int(p) for p in parts])
            element_regions.append(target)
        elif section == "nset":
            nsets[target].extend(int(p) for p in parts)
        elif section == "surface":
            surfaces[target].append((int(parts[0]), int(parts[1].upper().lstrip("S"))))

    order = np.argsort(node_ids, kind="stable")
    ids_sorted = np.asarray(node_ids, dtype=np.int64)[order]
    remap = {int(i): k for k, i in enumerate(ids_sorted)}
    nodes = np.asarray(coords, dtype=np.float64)[order]

    elements = np.empty((len(element_rows), 10), dtype=np.int64)
    for r, row in enumerate(element_rows):
        if len(row) != 11:
            raise ValueError(f"{path}: element line needs id + 10 nodes, got {len(row)}")
        for c, nid in enumerate(row[1:]):
            if nid not in remap:
                raise ValueError(f"{path}: dangling node index {nid}")
            elements[r, c] = remap[nid]
    regions = np.asarray(element_regions, dtype=np.uint8)

    def face_tuple(elem_row: np.ndarray, code: int) -> np.ndarray:
        i, j, k = _DECK_FACES[code]
        local = {frozenset((0, 1)): 4, frozenset((1, 2)): 5, frozenset((0, 2)): 6,
                 frozenset((0, 3)): 7, frozenset((1, 3)): 8, frozenset((2, 3)): 9}
        mids = [local[frozenset((i, j))], local[frozenset((j, k))], local[frozenset((k, i))]]
        return elem_row[[i, j, k, *mids]]

    def build_faces(pairs):
        faces = np.empty((len(pairs), 6), dtype=np.int64)
        for r, (eid, code) in enumerate(pairs):
            row = elements[eid - 1]
            face = face_tuple(row, code)
            # orient the normal away from the owning element
            tri = nodes[face[:3]]
            normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
            to_elem = nodes[row[:4]].mean(axis=0) - tri.mean(axis=0)
            if normal @ to_elem > 0:
                face = face[[0, 2, 1, 5, 4, 3]]
            faces[r] = face
        return faces

    return TetMesh(nodes=nodes, elements=elements, regions=regions,
                   top_nodes=np.array(sorted(remap[i] for i in nsets.get("TOP", [])),
                                      dtype=np.int64),
                   bottom_nodes=np.array(sorted(remap[i] for i in nsets.get("BOTTOM", [])),
                                         dtype=np.int64),
                   luminal_faces=build_faces(surfaces.get("LUMINAL", [])),
                   interface_faces=build_faces(surfaces.get("INTERFACE", [])),
                   columns=None)


def export_mesh(mesh: TetMesh, path: str, fmt: str | None = None) -> None:
    """Write the mesh as a legacy-VTK unstructured grid or a solver deck."""
    if fmt is None:
        fmt = "vtk" if path.endswith(".vtk") else "deck"
    if fmt == "vtk":
        write_vtk_ugrid(path, mesh)
    elif fmt == "deck":
        write_solver_deck(path, mesh)
    else:
        raise ValueError(f"unknown mesh format '{fmt}' (expected 'vtk' or 'deck')")


def import_mesh(path: str) -> TetMesh:
    """Read a mesh written by export_mesh (format chosen by extension/content)."""
    with open(path, "r", encoding="ascii") as fh:
        head = fh.read(64)
    if head.startswith("# vtk"):
        return read_vtk_ugrid(path)[0]
    if head.startswith("*HEADING") or head.startswith("*NODE"):
        return read_solver_deck(path)
    raise ValueError(f"{path}: unrecognized mesh file format")
