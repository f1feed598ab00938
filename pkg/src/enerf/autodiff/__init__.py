from .tensor import (
    Tensor,
    Graph,
    record,
    recording,
    backward,
    register,
    as_tensor,
    add,
    sub,
    mul,
    div,
    neg,
    exp,
    log,
    sqrt,
    square,
    pow_scalar,
    relu,
    softplus,
    sigmoid,
    clip_min,
    where,
    matmul,
    tsum,
    tmean,
    reshape,
    transpose,
    concat,
    stack,
    take,
    softmax_axis,
    norm_last,
)
from .conv import conv2d, conv3d, conv2d_transposed, conv3d_transposed
from .sample import grid_sample_2d, grid_sample_3d
from .adam import AdamState, adam_step
