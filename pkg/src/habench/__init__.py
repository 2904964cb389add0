"""Benchmark harmonization of multi-site voxel images.

The package loads NIfTI volumes and a sample table, removes site effects with
a registered harmonization method (identity, global scaling or ComBat) and
reports the residual site effect voxel by voxel.
"""

from .core import (DesignMatrix, GeometryError, HabenchError, Mask, SampleRow, SampleTable, SiteLayout,
                   VolumeGeometry, VoxelDataset, assemble_dataset, build_design_matrix, erode_mask)
from .harmonize import (apply_combat, apply_global_scaling, available_methods, fit_combat, fit_global_scaling,
                        get_method, load_model, register_method)
from .nifti_io import NiftiError, Volume, read_mask, read_volume, write_volume
from .report import compare_reports, generate_report, write_comparison, write_report
from .synth import SiteSpec, SynthSpec, generate, write_synth_bundle
from .tabular_io import RunConfig, read_run_config, read_sample_table

__version__ = "0.1.0"
