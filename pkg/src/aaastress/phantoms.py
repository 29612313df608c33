"""Synthetic vessel phantoms: parametric tube/bulge surfaces, voxel label
volumes, and assorted shapes used for benchmarks and tests.

The straight-tube phantom (outer radius 13.5 mm, wall 1.5 mm) has the lumen
exactly one wall thickness inside the outer surface, so the layered mesher
produces a pure-wall mesh suitable for thick-cylinder benchmarks.  The bulge
phantom widens a straight vessel with a Gaussian radius profile while the
lumen stays straight, leaving a thrombus-filled gap.
"""

from __future__ import annotations

import numpy as np

from .surface import TriSurface
from .volume import BACKGROUND, CALCIFICATION, LUMEN, WALL_ILT, BinaryMask, LabelVolume

__all__ = [
    "tube_surface", "icosphere", "make_lame_phantom", "make_bulge_phantom",
    "bulge_radius", "label_cylinder_volume", "bulge_label_volume", "voxel_ball",
]


def tube_surface(z_lo: float, z_hi: float, n_theta: int, n_z: int,
                 radius: float | None = None, radius_fn=None) -> TriSurface:
    """Closed cylinder (optionally with an axially varying radius) with flat
    end caps, wound outward."""
    if (radius is None) == (radius_fn is None):
        raise ValueError("provide exactly one of radius or radius_fn")
    if radius_fn is None:
        radius_fn = lambda z: np.full_like(np.asarray(z, dtype=np.float64), radius)
    theta = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
    zs = np.linspace(z_lo, z_hi, n_z + 1)
    rs = np.asarray(radius_fn(zs), dtype=np.float64)
    ring = np.stack([np.cos(theta), np.sin(theta)], axis=1)      # (n_theta,2)
    verts = np.empty(((n_z + 1) * n_theta + 2, 3))
    for j, (z, r) in enumerate(zip(zs, rs)):
        verts[j * n_theta:(j + 1) * n_theta, :2] = r * ring
        verts[j * n_theta:(j + 1) * n_theta, 2] = z
    c_bot = (n_z + 1) * n_theta
    c_top = c_bot + 1
    verts[c_bot] = (0.0, 0.0, z_lo)
    verts[c_top] = (0.0, 0.0, z_hi)

    tris = []
    for j in range(n_z):
        for i in range(n_theta):
            i2 = (i + 1) % n_theta
            v00 = j * n_theta + i
            v10 = j * n_theta + i2
            v01 = (j + 1) * n_theta + i
            v11 = (j + 1) * n_theta + i2
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    top0 = n_z * n_theta
    for i in range(n_theta):
        i2 = (i + 1) % n_theta
        tris.append((c_bot, i2, i))                  # bottom cap, normal -z
        tris.append((c_top, top0 + i, top0 + i2))    # top cap, normal +z
    return TriSurface(vertices=verts, triangles=np.asarray(tris, dtype=np.int64))


_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array([
    (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
    (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
    (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
], dtype=np.float64)
_ICO_FACES = np.array([
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
], dtype=np.int64)


def icosphere(radius: float = 10.0, subdivisions: int = 3,
              center=(0.0, 0.0, 0.0)) -> TriSurface:
    """Geodesic sphere by icosahedron subdivision (no flat regions anywhere)."""
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for (a, b, c) in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    xyz = np.asarray(verts) * radius + np.asarray(center, dtype=np.float64)
    tris = np.asarray(faces, dtype=np.int64)
    surf = TriSurface(vertices=xyz, triangles=tris)
    from .surface import enclosed_volume

    if enclosed_volume(surf) < 0:
        surf = TriSurface(vertices=xyz, triangles=tris[:, ::-1])
    return surf


def make_lame_phantom(n_theta: int = 48, n_z: int = 48, length: float = 110.0,
                      r_outer: float = 13.5, thickness: float = 1.5,
                      lumen_n_theta: int | None = None) -> tuple[TriSurface, TriSurface]:
    """Thick-cylinder benchmark pair: outer tube and a lumen exactly one wall
    thickness inside, so the swept mesh is wall-only (full contact)."""
    half = length / 2.0
    wall = tube_surface(-half, half, n_theta, n_z, radius=r_outer)
    # lumen extends past the wall ends so rim rays hit side triangles squarely
    lumen = tube_surface(-half - 1.0, half + 1.0, lumen_n_theta or n_theta,
                         max(8, n_z // 2), radius=r_outer - thickness)
    return wall, lumen


def bulge_radius(z, r_end: float = 10.5, r_max: float = 16.0,
                 sigma: float = 20.0, z_center: float = 0.0):
    z = np.asarray(z, dtype=np.float64)
    return r_end + (r_max - r_end) * np.exp(-(((z - z_center) / sigma) ** 2))


def make_bulge_phantom(n_theta: int = 36, n_z: int = 45, length: float = 120.0,
                       r_end: float = 10.5, r_max: float = 16.0,
                       sigma: float = 20.0, lumen_radius: float = 8.0,
                       ) -> tuple[TriSurface, TriSurface]:
    """Aneurysm-like phantom: Gaussian outer bulge over a straight lumen."""
    half = length / 2.0
    wall = tube_surface(-half, half, n_theta, n_z,
                        radius_fn=lambda z: bulge_radius(z, r_end, r_max, sigma))
    lumen = tube_surface(-half - 1.0, half + 1.0, n_theta, max(8, n_z // 2),
                         radius=lumen_radius)
    return wall, lumen


# ---------------------------------------------------------------------------
# voxel phantoms
# ---------------------------------------------------------------------------

def _cyl_coords(shape, spacing):
    nx, ny, nz = shape
    sx, sy, sz = spacing
    cx, cy = (nx - 1) / 2.0 * sx, (ny - 1) / 2.0 * sy
    x = np.arange(nx) * sx - cx
    y = np.arange(ny) * sy - cy
    r = np.hypot(x[:, None], y[None, :])                        # (nx,ny)
    z = np.arange(nz) * sz
    return r, z


def label_cylinder_volume(shape=(64, 64, 40), spacing=(1.0, 1.0, 1.0),
                          lumen_radius: float = 8.0, outer_radius: float = 14.0,
                          z_margin: int = 3, with_artifacts: bool = True) -> LabelVolume:
    """Straight-vessel label volume: lumen (1) inside a wall+thrombus annulus
    (2) with a few calcification voxels (3).  With artifacts enabled it also
    carries a thin radial sheet, a detached blob, and an internal hole, which
    the cleaning pipeline must remove."""
    labels = np.zeros(shape, dtype=np.uint8)
    r, z = _cyl_coords(shape, spacing)
    inside_z = (z >= z[z_margin]) & (z <= z[-1 - z_margin])
    annulus = (r <= outer_radius)[:, :, None] & inside_z[None, None, :]
    labels[annulus] = WALL_ILT
    core = (r <= lumen_radius)[:, :, None] & inside_z[None, None, :]
    labels[core] = LUMEN

    nx, ny, nz = shape
    ci, cj, ck = nx // 2, ny // 2, nz // 2
    ring_i = ci + int(round((lumen_radius + outer_radius) / 2.0 / spacing[0]))
    labels[ring_i:ring_i + 2, cj:cj + 2, ck:ck + 2] = CALCIFICATION

    if with_artifacts:
        # thin sheet sticking radially out of the vessel (1 voxel thick)
        sheet_i0 = ci + int(np.ceil(outer_radius / spacing[0]))
        labels[sheet_i0:sheet_i0 + 6, cj, ck - 4:ck + 4] = WALL_ILT
        # detached blob far from the vessel
        labels[1:3, 1:3, ck:ck + 2] = LUMEN
        # internal hole inside the annulus
        hole_i = ci + int(round((lumen_radius + 2.0) / spacing[0]))
        labels[hole_i, cj, ck] = BACKGROUND
    return LabelVolume(labels=labels,
                       spacing=np.asarray(spacing, dtype=np.float64),
                       origin=np.zeros(3))


def bulge_label_volume(shape=(44, 44, 100), spacing: float = 1.25,
                       lumen_radius: float = 8.0, r_end: float = 10.5,
                       r_max: float = 16.0, sigma: float = 20.0,
                       z_margin: int = 2) -> LabelVolume:
    """Voxelized bulge phantom for end-to-end pipeline runs."""
    sp = (spacing, spacing, spacing)
    labels = np.zeros(shape, dtype=np.uint8)
    r, z = _cyl_coords(shape, sp)
    z_center = (z[z_margin] + z[-1 - z_margin]) / 2.0
    prof = bulge_radius(z, r_end, r_max, sigma, z_center=z_center)
    inside_z = (z >= z[z_margin]) & (z <= z[-1 - z_margin])
    body = (r[:, :, None] <= prof[None, None, :]) & inside_z[None, None, :]
    labels[body] = WALL_ILT
    core = (r <= lumen_radius)[:, :, None] & inside_z[None, None, :]
    labels[core] = LUMEN
    return LabelVolume(labels=labels, spacing=np.asarray(sp), origin=np.zeros(3))


def voxel_ball(radius: float = 20.0, spacing: float = 1.0, pad: int = 4) -> BinaryMask:
    """Solid ball mask (voxel centers within `radius` of the center)."""
    n = int(np.ceil(2 * radius / spacing)) + 2 * pad + 1
    c = (n - 1) / 2.0 * spacing
    ax = np.arange(n) * spacing - c
    d2 = ax[:, None, None] ** 2 + ax[None, :, None] ** 2 + ax[None, None, :] ** 2
    return BinaryMask(values=d2 <= radius * radius,
                      spacing=np.full(3, float(spacing)), origin=np.zeros(3))
