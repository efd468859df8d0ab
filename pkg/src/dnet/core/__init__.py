from .conv import ConvSpec, InvalidSpecError, ShapeError
from .gradcheck import GradCheckResult, check_gradients, pooled_error, relative_error, uniform_entries
from .ops import (
    activation,
    add,
    batch_norm,
    channel_stats_pool,
    concat_channels,
    conv3d,
    branch_log,
    frozen_branches,
    cost_log,
    dropout,
    elementwise,
    gelu,
    global_avg_pool,
    layer_norm,
    leaky_relu,
    mul,
    normalize,
    reduce_mean,
    reduce_sum,
    scale,
    sigmoid,
    slice_channels,
    transposed_conv3d,
    weighted_sum,
)
from .tensor import (
    Gradients,
    NonFiniteError,
    NotOnTapeError,
    Tape,
    Tensor,
    active_tape,
    backward,
    no_tape,
)
