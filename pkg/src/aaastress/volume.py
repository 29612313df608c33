"""Labeled segmentation volumes: file IO, cropping, and the mask-cleaning chain.

Voxel arrays are stored as (nx, ny, nz) with the x index fastest in the
underlying file formats (NRRD / MetaImage store Fortran order).  The origin is
the physical position (mm) of the center of voxel (0, 0, 0); the center of
voxel (i, j, k) is ``origin + (i, j, k) * spacing``.
"""

from __future__ import annotations

import dataclasses
import gzip
import os
import warnings
import zlib

import numpy as np
from scipy import ndimage

BACKGROUND = 0
LUMEN = 1
WALL_ILT = 2
CALCIFICATION = 3
LABEL_SET = frozenset({BACKGROUND, LUMEN, WALL_ILT, CALCIFICATION})

_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


class CleaningStageError(RuntimeError):
    """A stage of clean_pipeline failed; carries the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"error at stage {stage}: {cause}")
        self.stage = stage


def _validate_grid(spacing, origin) -> tuple[tuple[float, ...], tuple[float, ...]]:
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(float(o) for o in origin)
    if len(spacing) != 3 or len(origin) != 3:
        raise ValueError("spacing and origin must be length-3")
    if any(not np.isfinite(s) or s <= 0.0 for s in spacing):
        raise ValueError(f"spacing components must be strictly positive, got {spacing}")
    return spacing, origin


@dataclasses.dataclass(frozen=True)
class LabelVolume:
    """3D voxel grid of tissue labels with physical spacing/origin (mm)."""

    labels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        spacing, origin = _validate_grid(self.spacing, self.origin)
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"labels must be 3D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"labels must have an integer dtype, got {labels.dtype}")
        present = np.unique(labels)
        bad = [int(v) for v in present if int(v) not in LABEL_SET]
        if bad:
            raise ValueError(
                f"unknown label value {bad[0]}: allowed labels are {sorted(LABEL_SET)}"
            )
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)


@dataclasses.dataclass(frozen=True)
class BinaryMask:
    """Boolean voxel grid with the same geometric metadata contract as LabelVolume."""

    values: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        spacing, origin = _validate_grid(self.spacing, self.origin)
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {values.shape}")
        if values.dtype != np.bool_:
            if np.issubdtype(values.dtype, np.integer):
                extra = np.setdiff1d(np.unique(values), [0, 1])
                if extra.size:
                    raise ValueError(f"mask voxels must be 0/1, found value {int(extra[0])}")
                values = values.astype(bool)
            else:
                raise ValueError(f"mask must be boolean or 0/1 integer, got {values.dtype}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    @property
    def voxel_volume(self) -> float:
        return float(self.spacing[0] * self.spacing[1] * self.spacing[2])

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.values))

    def is_isotropic(self, rtol: float = 1e-9) -> bool:
        s = self.spacing
        return abs(s[0] - s[1]) <= rtol * s[0] and abs(s[0] - s[2]) <= rtol * s[0]


@dataclasses.dataclass(frozen=True)
class CleaningConfig:
    """Parameters for the cleaning chain."""

    roi_z_range: tuple[int, int] | None = None
    smooth_kernel_radius_mm: float = 1.5
    smooth_threshold: float = 0.5
    opening_radius_mm: float = 2.0
    gaussian_sigma: float = 0.2
    connectivity: int = 26

    def __post_init__(self):
        if not 0.0 < self.smooth_threshold < 1.0:
            raise ValueError(f"smooth_threshold must lie in (0,1), got {self.smooth_threshold}")
        if self.smooth_kernel_radius_mm < 0 or self.opening_radius_mm < 0:
            raise ValueError("kernel/opening radii must be >= 0")
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")
        if self.connectivity not in _CONNECTIVITY_RANK:
            raise ValueError(f"connectivity must be one of 6/18/26, got {self.connectivity}")
        if self.roi_z_range is not None:
            lo, hi = self.roi_z_range
            if lo < 0 or hi < lo:
                raise ValueError(f"roi_z_range must satisfy 0 <= lo <= hi, got {self.roi_z_range}")


# ---------------------------------------------------------------------------
# File IO: NRRD and MetaImage, little-endian integer voxels, raw or gzip.
# ---------------------------------------------------------------------------

_NRRD_TYPES = {
    "signed char": np.int8, "int8": np.int8, "int8_t": np.int8, "char": np.int8,
    "uchar": np.uint8, "unsigned char": np.uint8, "uint8": np.uint8, "uint8_t": np.uint8,
    "short": np.int16, "short int": np.int16, "signed short": np.int16,
    "int16": np.int16, "int16_t": np.int16,
    "ushort": np.uint16, "unsigned short": np.uint16, "uint16": np.uint16,
    "uint16_t": np.uint16,
}
_MET_TYPES = {
    "MET_CHAR": np.int8, "MET_UCHAR": np.uint8,
    "MET_SHORT": np.int16, "MET_USHORT": np.uint16,
}
_NRRD_TYPE_NAMES = {np.uint8: "uint8", np.int8: "int8", np.uint16: "uint16", np.int16: "int16"}
_MET_TYPE_NAMES = {np.uint8: "MET_UCHAR", np.int8: "MET_CHAR",
                   np.uint16: "MET_USHORT", np.int16: "MET_SHORT"}


def _parse_vector_triple(text: str) -> tuple[float, float, float]:
    text = text.strip().lstrip("(").rstrip(")")
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(float(p) for p in parts[:3])


def _read_nrrd(path: str) -> tuple[np.ndarray, tuple, tuple]:
    with open(path, "rb") as fh:
        blob = fh.read()
    eoh = blob.find(b"\n\n")
    sep = 2
    if eoh < 0:
        eoh = blob.find(b"\r\n\r\n")
        sep = 4
    if eoh < 0:
        raise ValueError(f"{path}: missing NRRD header terminator (blank line)")
    header_text = blob[:eoh].decode("ascii", errors="replace")
    lines = header_text.splitlines()
    if not lines or not lines[0].startswith("NRRD"):
        raise ValueError(f"{path}: not a NRRD file (bad magic)")
    fields: dict[str, str] = {}
    for line in lines[1:]:
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            continue
        key, _, value = line.partition(":")
        fields[key.strip().lower()] = value.lstrip("=").strip()

    if int(fields.get("dimension", "0")) != 3:
        raise ValueError(f"{path}: only 3D volumes are supported")
    sizes = tuple(int(n) for n in fields["sizes"].split())
    type_name = fields.get("type", "").strip().lower()
    if type_name not in _NRRD_TYPES:
        raise ValueError(f"{path}: non-integer or unsupported voxel type '{fields.get('type')}'")
    dtype = np.dtype(_NRRD_TYPES[type_name]).newbyteorder("<")
    endian = fields.get("endian", "little").strip().lower()
    if endian == "big" and dtype.itemsize > 1:
        raise ValueError(f"{path}: big-endian volumes are not supported")

    if "space directions" in fields:
        rows = [r for r in fields["space directions"].split(")") if r.strip().strip("(")]
        mat = [_parse_vector_triple(r) for r in rows]
        spacing = tuple(float(np.linalg.norm(row)) for row in mat[:3])
        for i, row in enumerate(mat[:3]):
            off = [abs(row[j]) for j in range(3) if j != i]
            if max(off) > 1e-9 * max(spacing):
                raise ValueError(f"{path}: non-axis-aligned space directions are not supported")
    elif "spacings" in fields:
        spacing = tuple(float(s) for s in fields["spacings"].split()[:3])
    else:
        spacing = (1.0, 1.0, 1.0)
    if "space origin" in fields:
        origin = _parse_vector_triple(fields["space origin"])
    elif "axis mins" in fields:
        origin = tuple(float(s) for s in fields["axis mins"].split()[:3])
    else:
        origin = (0.0, 0.0, 0.0)

    if "data file" in fields or "datafile" in fields:
        raise ValueError(f"{path}: detached NRRD data files are not supported")
    payload = blob[eoh + sep:]
    encoding = fields.get("encoding", "raw").strip().lower()
    if encoding in ("gzip", "gz"):
        payload = gzip.decompress(payload)
    elif encoding != "raw":
        raise ValueError(f"{path}: unsupported encoding '{encoding}'")
    expected = int(np.prod(sizes)) * dtype.itemsize
    if len(payload) < expected:
        raise ValueError(f"{path}: truncated data ({len(payload)} < {expected} bytes)")
    data = np.frombuffer(payload[:expected], dtype=dtype)
    array = np.ascontiguousarray(data.reshape(sizes, order="F"))
    return array, spacing, origin


def _read_metaimage(path: str) -> tuple[np.ndarray, tuple, tuple]:
    with open(path, "rb") as fh:
        blob = fh.read()
    # Header is ASCII "Key = Value" lines; .mha appends binary after
    # "ElementDataFile = LOCAL".
    fields: dict[str, str] = {}
    pos = 0
    data_start = None
    while pos < len(blob):
        nl = blob.find(b"\n", pos)
        if nl < 0:
            nl = len(blob)
        line = blob[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
        if key.strip() == "ElementDataFile":
            data_start = pos
            break
    if "ElementDataFile" not in fields:
        raise ValueError(f"{path}: missing ElementDataFile field")
    if int(fields.get("NDims", "0")) != 3:
        raise ValueError(f"{path}: only 3D volumes are supported")
    sizes = tuple(int(n) for n in fields["DimSize"].split())
    et = fields.get("ElementType", "")
    if et not in _MET_TYPES:
        raise ValueError(f"{path}: non-integer or unsupported voxel type '{et}'")
    dtype = np.dtype(_MET_TYPES[et]).newbyteorder("<")
    if fields.get("ElementByteOrderMSB", "False").lower() == "true" and dtype.itemsize > 1:
        raise ValueError(f"{path}: big-endian volumes are not supported")
    spacing = tuple(float(s) for s in fields.get("ElementSpacing", "1 1 1").split()[:3])
    origin_field = fields.get("Offset", fields.get("Origin", fields.get("Position", "0 0 0")))
    origin = tuple(float(s) for s in origin_field.split()[:3])

    source = fields["ElementDataFile"]
    if source == "LOCAL":
        payload = blob[data_start:]
    else:
        raw_path = os.path.join(os.path.dirname(os.path.abspath(path)), source)
        with open(raw_path, "rb") as fh:
            payload = fh.read()
    if fields.get("CompressedData", "False").lower() == "true":
        payload = zlib.decompress(payload)
    expected = int(np.prod(sizes)) * dtype.itemsize
    if len(payload) < expected:
        raise ValueError(f"{path}: truncated data ({len(payload)} < {expected} bytes)")
    data = np.frombuffer(payload[:expected], dtype=dtype)
    array = np.ascontiguousarray(data.reshape(sizes, order="F"))
    return array, spacing, origin


def _read_any(path: str) -> tuple[np.ndarray, tuple, tuple]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such volume file: {path}")
    ext = os.path.splitext(path)[1].lower()
    if ext == ".nrrd":
        return _read_nrrd(path)
    if ext in (".mha", ".mhd"):
        return _read_metaimage(path)
    raise ValueError(f"{path}: unsupported volume format '{ext}' (expected .nrrd/.mha/.mhd)")


def load_volume(path: str) -> LabelVolume:
    """Read a labeled NRRD/MetaImage volume, validating the label set."""
    array, spacing, origin = _read_any(path)
    return LabelVolume(labels=array, spacing=spacing, origin=origin)


def load_mask(path: str) -> BinaryMask:
    """Read a 0/1 NRRD/MetaImage volume as a BinaryMask."""
    array, spacing, origin = _read_any(path)
    return BinaryMask(values=array, spacing=spacing, origin=origin)


def _write_nrrd(path: str, array: np.ndarray, spacing, origin, compress: bool) -> None:
    dtype = array.dtype.type
    if dtype not in _NRRD_TYPE_NAMES:
        raise ValueError(f"unsupported voxel dtype {array.dtype} for NRRD output")
    header = [
        "NRRD0004",
        "# written by aaastress",
        f"type: {_NRRD_TYPE_NAMES[dtype]}",
        "dimension: 3",
        "space dimension: 3",
        f"sizes: {array.shape[0]} {array.shape[1]} {array.shape[2]}",
        "space directions: ({:.17g},0,0) (0,{:.17g},0) (0,0,{:.17g})".format(*spacing),
        "kinds: domain domain domain",
        "endian: little",
        f"encoding: {'gzip' if compress else 'raw'}",
        "space origin: ({:.17g},{:.17g},{:.17g})".format(*origin),
        "",
        "",
    ]
    payload = np.asfortranarray(array).tobytes(order="F")
    if compress:
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as fh:
        fh.write("\n".join(header).encode("ascii"))
        fh.write(payload)


def _write_metaimage(path: str, array: np.ndarray, spacing, origin) -> None:
    dtype = array.dtype.type
    if dtype not in _MET_TYPE_NAMES:
        raise ValueError(f"unsupported voxel dtype {array.dtype} for MetaImage output")
    ext = os.path.splitext(path)[1].lower()
    local = ext == ".mha"
    data_file = "LOCAL" if local else os.path.basename(path)[:-4] + ".raw"
    header = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        "Offset = {:.17g} {:.17g} {:.17g}".format(*origin),
        "ElementSpacing = {:.17g} {:.17g} {:.17g}".format(*spacing),
        f"DimSize = {array.shape[0]} {array.shape[1]} {array.shape[2]}",
        f"ElementType = {_MET_TYPE_NAMES[dtype]}",
        f"ElementDataFile = {data_file}",
        "",
    ]
    payload = np.asfortranarray(array).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write("\n".join(header).encode("ascii"))
        if local:
            fh.write(payload)
    if not local:
        with open(os.path.join(os.path.dirname(os.path.abspath(path)), data_file), "wb") as fh:
            fh.write(payload)


def save_volume(path: str, vol: LabelVolume | BinaryMask, compress: bool = True) -> None:
    """Write a label volume or mask as .nrrd/.mha/.mhd(+.raw), chosen by extension."""
    if isinstance(vol, BinaryMask):
        array = vol.values.astype(np.uint8)
    else:
        array = vol.labels.astype(np.uint8 if vol.labels.max(initial=0) <= 255 else np.int16)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".nrrd":
        _write_nrrd(path, array, vol.spacing, vol.origin, compress)
    elif ext in (".mha", ".mhd"):
        _write_metaimage(path, array, vol.spacing, vol.origin)
    else:
        raise ValueError(f"unsupported output format '{ext}' (expected .nrrd/.mha/.mhd)")


# ---------------------------------------------------------------------------
# Cleaning operations
# ---------------------------------------------------------------------------

def crop_roi(vol: LabelVolume, z_range: tuple[int, int]) -> LabelVolume:
    """Restrict the volume to an inclusive z-slice range; shifts origin.z accordingly."""
    lo, hi = int(z_range[0]), int(z_range[1])
    nz = vol.dims[2]
    if hi < lo:
        raise ValueError(f"empty z range [{lo},{hi}]")
    if lo < 0 or hi >= nz:
        raise ValueError(f"z range [{lo},{hi}] out of bounds for nz={nz}")
    labels = np.ascontiguousarray(vol.labels[:, :, lo:hi + 1])
    ox, oy, oz = vol.origin
    return LabelVolume(labels=labels, spacing=vol.spacing,
                       origin=(ox, oy, oz + lo * vol.spacing[2]))


def merge_labels(vol: LabelVolume, keep) -> BinaryMask:
    """Binary mask of voxels whose label is in `keep` (a subset of the label set)."""
    keep = frozenset(int(k) for k in keep)
    if not keep <= LABEL_SET:
        bad = sorted(keep - LABEL_SET)
        raise ValueError(f"labels {bad} are not in the declared label set {sorted(LABEL_SET)}")
    if keep:
        values = np.isin(vol.labels, sorted(keep))
    else:
        values = np.zeros(vol.dims, dtype=bool)
    return BinaryMask(values=values, spacing=vol.spacing, origin=vol.origin)


def _structure(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[int(connectivity)])


def largest_component(mask: BinaryMask, connectivity: int = 26) -> BinaryMask:
    """Keep only the largest connected foreground component.

    Ties are broken by the lowest linear (C-order) voxel index at which a
    component first occurs.
    """
    if connectivity not in _CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be one of 6/18/26, got {connectivity}")
    if mask.count == 0:
        raise ValueError("largest_component: input mask is empty")
    labeled, n = ndimage.label(mask.values, structure=_structure(connectivity))
    sizes = np.bincount(labeled.ravel())
    sizes[0] = 0
    best = sizes.max()
    candidates = np.flatnonzero(sizes == best)
    if candidates.size == 1:
        winner = int(candidates[0])
    else:
        flat = labeled.ravel()
        firsts = {int(c): None for c in candidates}
        remaining = len(firsts)
        for idx in np.flatnonzero(np.isin(flat, candidates)):
            c = int(flat[idx])
            if firsts[c] is None:
                firsts[c] = int(idx)
                remaining -= 1
                if remaining == 0:
                    break
        winner = min(firsts, key=lambda c: firsts[c])
    return BinaryMask(values=labeled == winner, spacing=mask.spacing, origin=mask.origin)


def resample_isotropic(mask: BinaryMask) -> BinaryMask:
    """Nearest-neighbor resample onto a cubic grid with spacing = min(input spacing)."""
    s = float(min(mask.spacing))
    if mask.is_isotropic():
        return BinaryMask(values=mask.values.copy(), spacing=mask.spacing, origin=mask.origin)
    new_dims = tuple(max(1, int(round(n * sp / s))) for n, sp in zip(mask.dims, mask.spacing))
    idx = []
    for axis in range(3):
        centers = np.arange(new_dims[axis]) * s
        src = np.rint(centers / mask.spacing[axis]).astype(np.intp)
        idx.append(np.clip(src, 0, mask.dims[axis] - 1))
    values = mask.values[np.ix_(idx[0], idx[1], idx[2])]
    return BinaryMask(values=np.ascontiguousarray(values), spacing=(s, s, s), origin=mask.origin)


def _require_isotropic(mask: BinaryMask, op: str) -> float:
    if not mask.is_isotropic():
        raise ValueError(f"{op} requires an isotropic mask; spacing is {mask.spacing}")
    return float(mask.spacing[0])


def convolution_smooth(mask: BinaryMask, kernel_radius_mm: float, threshold: float) -> BinaryMask:
    """Blur with a normalized box kernel and re-threshold; removes thin features."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    s = _require_isotropic(mask, "convolution_smooth")
    radius_vox = kernel_radius_mm / s
    if radius_vox < 1.0:
        warnings.warn(
            f"convolution_smooth: kernel radius {kernel_radius_mm} mm is below one voxel "
            f"({s} mm); returning the mask unchanged", RuntimeWarning, stacklevel=2)
        return BinaryMask(values=mask.values.copy(), spacing=mask.spacing, origin=mask.origin)
    size = 2 * int(radius_vox) + 1
    blurred = ndimage.uniform_filter(mask.values.astype(np.float64), size=size,
                                     mode="constant", cval=0.0)
    return BinaryMask(values=blurred > threshold, spacing=mask.spacing, origin=mask.origin)


def fill_holes(mask: BinaryMask) -> BinaryMask:
    """Turn background cavities (background components not reaching the border) into foreground.

    Background connectivity is 6 (the complement of the default 26-connected
    foreground), the standard complementary convention.
    """
    bg_labels, n = ndimage.label(~mask.values, structure=_structure(6))
    if n == 0:
        return BinaryMask(values=mask.values.copy(), spacing=mask.spacing, origin=mask.origin)
    border = np.zeros(mask.dims, dtype=bool)
    border[0, :, :] = border[-1, :, :] = True
    border[:, 0, :] = border[:, -1, :] = True
    border[:, :, 0] = border[:, :, -1] = True
    outside = np.unique(bg_labels[border & (bg_labels > 0)])
    keep_background = np.isin(bg_labels, outside) & (bg_labels > 0)
    return BinaryMask(values=~keep_background if n else mask.values.copy(),
                      spacing=mask.spacing, origin=mask.origin)


def _ball_structure(radius_vox: float) -> np.ndarray:
    r = int(np.floor(radius_vox))
    if r < 1:
        return np.ones((1, 1, 1), dtype=bool)
    g = np.arange(-r, r + 1)
    dx, dy, dz = np.meshgrid(g, g, g, indexing="ij")
    return (dx * dx + dy * dy + dz * dz) <= radius_vox * radius_vox


def remove_extrusions(mask: BinaryMask, opening_radius_mm: float) -> BinaryMask:
    """Morphological opening (erosion then dilation) with a ball structuring element."""
    s = _require_isotropic(mask, "remove_extrusions")
    radius_vox = opening_radius_mm / s
    if radius_vox < 1.0:
        return BinaryMask(values=mask.values.copy(), spacing=mask.spacing, origin=mask.origin)
    ball = _ball_structure(radius_vox)
    eroded = ndimage.binary_erosion(mask.values, structure=ball, border_value=0)
    opened = ndimage.binary_dilation(eroded, structure=ball, border_value=0)
    return BinaryMask(values=opened, spacing=mask.spacing, origin=mask.origin)


def gaussian_smooth_binary(mask: BinaryMask, sigma_mm: float) -> BinaryMask:
    """Gaussian-blur the 0/1 indicator and re-threshold at 0.5 (sigma in mm)."""
    if sigma_mm < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma_mm}")
    if sigma_mm == 0:
        return BinaryMask(values=mask.values.copy(), spacing=mask.spacing, origin=mask.origin)
    s = _require_isotropic(mask, "gaussian_smooth_binary")
    blurred = ndimage.gaussian_filter(mask.values.astype(np.float64), sigma=sigma_mm / s,
                                      mode="constant", cval=0.0)
    return BinaryMask(values=blurred > 0.5, spacing=mask.spacing, origin=mask.origin)


def clean_pipeline(vol: LabelVolume, cfg: CleaningConfig) -> tuple[BinaryMask, BinaryMask]:
    """Run the full cleaning chain; returns (aaa, lumen) masks with lumen ⊆ aaa.

    Stages, in order: crop → merge/extract → largest component → isotropic
    resample → box-kernel smooth → opening → hole fill → box-kernel smooth.
    Any stage failure is re-raised as CleaningStageError naming the stage.
    """
    def run(stage: str, fn, *args):
        try:
            return fn(*args)
        except CleaningStageError:
            raise
        except Exception as exc:
            raise CleaningStageError(stage, exc) from exc

    if cfg.roi_z_range is not None:
        vol = run("crop_roi", crop_roi, vol, cfg.roi_z_range)
    aaa = run("merge_labels(aaa)", merge_labels, vol, {LUMEN, WALL_ILT, CALCIFICATION})
    lumen = run("merge_labels(lumen)", merge_labels, vol, {LUMEN})
    lumen = run("largest_component(lumen)", largest_component, lumen, cfg.connectivity)
    aaa = run("largest_component(aaa)", largest_component, aaa, cfg.connectivity)
    aaa = run("resample_isotropic(aaa)", resample_isotropic, aaa)
    lumen = run("resample_isotropic(lumen)", resample_isotropic, lumen)
    aaa = run("convolution_smooth(aaa)", convolution_smooth, aaa,
              cfg.smooth_kernel_radius_mm, cfg.smooth_threshold)
    lumen = run("convolution_smooth(lumen)", convolution_smooth, lumen,
                cfg.smooth_kernel_radius_mm, cfg.smooth_threshold)
    aaa = run("remove_extrusions(aaa)", remove_extrusions, aaa, cfg.opening_radius_mm)
    lumen = run("remove_extrusions(lumen)", remove_extrusions, lumen, cfg.opening_radius_mm)
    aaa = run("fill_holes(aaa)", fill_holes, aaa)
    lumen = run("fill_holes(lumen)", fill_holes, lumen)
    aaa = run("convolution_smooth(aaa,final)", convolution_smooth, aaa,
              cfg.smooth_kernel_radius_mm, cfg.smooth_threshold)
    lumen = run("convolution_smooth(lumen,final)", convolution_smooth, lumen,
                cfg.smooth_kernel_radius_mm, cfg.smooth_threshold)
    lumen = BinaryMask(values=lumen.values & aaa.values, spacing=lumen.spacing,
                       origin=lumen.origin)
    return aaa, lumen
