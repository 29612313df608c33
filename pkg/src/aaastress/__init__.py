"""Aneurysm wall-stress analysis pipeline.

From a labeled CT volume (lumen / wall+thrombus / calcification) to cleaned
masks, triangulated surfaces, a layered quadratic tetrahedral mesh, a linear
elastic pressure solve, transmurally averaged maximum principal stress, and
comparison metrics between segmentations and runs.
"""

__version__ = "0.1.0"

from .volume import (  # noqa: F401
    BACKGROUND, LUMEN, WALL_ILT, CALCIFICATION,
    BinaryMask, CleaningConfig, CleaningStageError, LabelVolume,
    clean_pipeline, convolution_smooth, crop_roi, fill_holes,
    gaussian_smooth_binary, largest_component, load_mask, load_volume,
    merge_labels, remove_extrusions, resample_isotropic, save_volume,
)
from .surface import (  # noqa: F401
    SelfIntersectionError, TriSurface,
    enclosed_volume, extract_isosurface, identify_end_rings, laplacian_smooth,
    offset_inward, surface_area, read_stl, read_vtk_polydata, write_stl,
    write_vtk_polydata,
)
from .meshing import (  # noqa: F401
    ILT, WALL,
    InvertedElementError, MeshColumns, QualityReport, TetMesh,
    build_layered_mesh, export_mesh, import_mesh, prisms_to_tets, quality_check,
)
from .solver import (  # noqa: F401
    CaseResult, DisplacementField, LoadCase, MaterialSpec, NonConvergenceError,
    StressField,
    apply_constraints, apply_pressure, assemble, max_principal, reaction_forces,
    recover_stress, run_case, solve, ush_average,
)
from .metrics import (  # noqa: F401
    SliceHDProfile, StressStats,
    directed_hausdorff, hausdorff, peak_stress, percentile_curve,
    percentile_stress, relative_difference, slice_hd_profile,
)
from .cli import PipelineConfig  # noqa: F401
