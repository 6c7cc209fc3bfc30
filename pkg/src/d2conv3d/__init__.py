"""Dynamically dilated 3-D convolution and its deformable relatives, in numpy/numba."""

from ._backend import active_backend, set_backend, use_backend
from .blocks import (
    D2Block,
    DeformBlock,
    d2block_backward,
    d2block_forward,
    dilation_activation,
    dropin_init,
    groupnorm,
    groupnorm_backward,
)
from .conv_ops import (
    ConvConfig,
    conv3d_backward,
    conv3d_forward,
    d2conv3d_backward,
    d2conv3d_forward,
    dcn1_3d_forward,
    dcn2_3d_forward,
    dcn_3d_backward,
    oob_stats_for,
    reference_direct_conv,
)
from .sampler import SamplingStats, record_oob, trilinear_sample, trilinear_sample_backward
from .tensor import KernelWeights, Shape5D, npy_read, npy_write, tensor_new

__version__ = "0.1.0"
