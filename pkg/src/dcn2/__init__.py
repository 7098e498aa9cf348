"""Modulated deformable convolution and RoI pooling with analytic gradients,
feature-mimic training at desk scale, and spatial-support analysis tools.
"""

from .deform_conv import (
    BRANCH_LR_MULTIPLIER,
    ConvWeights,
    KernelSpec,
    OffsetModulationField,
    mdconv_backward,
    mdconv_backward_optimized,
    mdconv_forward,
    mdconv_forward_optimized,
    offset_branch_forward,
)
from .deform_roipool import (
    BinField,
    PoolSpec,
    RoI,
    mdpool_backward,
    mdpool_forward,
    roi_branch_forward,
)
from .errors import (
    ArgumentError,
    CapabilityError,
    ConfigurationError,
    ConvergenceError,
    FormatError,
    ShapeError,
    SizeError,
    UsageError,
)
from .mimic import MimicBatch, MimicConfig, cosine_mimic_backward, cosine_mimic_loss
from .sampling import SamplePoint, bilinear_backward, bilinear_resize, bilinear_sample
from .support import (
    NodeProbe,
    SaliencyMask,
    SuperpixelLabeling,
    effective_receptive_field,
    effective_sampling_locations,
    saliency_region,
    slic_segment,
)
from .tensor import Tensor, TensorView, alloc, axpy_accumulate, read_tensor, write_tensor

__version__ = "0.1.0"
