"""Statistical shape models from control points with normals and RBF implicit surfaces."""
from .errors import (
    AllOneLabel,
    BadModeCount,
    ConfigError,
    DegenerateNormal,
    Diverged,
    EmptyBand,
    EmptyMesh,
    NonPositiveOffset,
    NumericalError,
    OutOfBounds,
    ParseError,
    RbfSsmError,
    SamplingStalled,
    ShapeMismatch,
    SingularSystem,
    SpecOutOfGrid,
)
from .losses import LossBreakdown, LossWeights, grad_total_loss, total_loss
from .optimize import FitConfig, FitResult, fit_cohort
from .rbfshape import ControlPointSet, DipoleSet, RbfModel, build_dipoles, fit_implicit, solve_rbf
from .recon import TriangleMesh, marching_cubes, reconstruct_mesh, surface_to_surface_distance
from .ssm import SsmModel, compactness, compute_pca, generalization, specificity
from .volume import SdfVolume, Segmentation, ShapeSpec, sdf_from_segmentation, synth_segmentation

__version__ = "0.1.0"
