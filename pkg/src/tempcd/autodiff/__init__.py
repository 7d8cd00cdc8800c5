from .functional import (
    COSINE_EPS,
    LAYER_NORM_EPS,
    cosine_similarity,
    elementwise,
    layer_norm,
    one_hot_argmax,
    softmax,
)
from .gradcheck import GradCheckResult, check_gradients, numerical_gradient, relative_error
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    gather,
    get_dtype,
    matmul,
    maximum,
    minimum,
    ones,
    set_debug,
    set_precision,
    stack,
    straight_through,
    tensor,
    where,
    zeros,
)

__all__ = [
    "COSINE_EPS",
    "LAYER_NORM_EPS",
    "GradCheckResult",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "check_gradients",
    "concat",
    "cosine_similarity",
    "elementwise",
    "gather",
    "get_dtype",
    "layer_norm",
    "matmul",
    "maximum",
    "minimum",
    "numerical_gradient",
    "one_hot_argmax",
    "ones",
    "relative_error",
    "set_debug",
    "set_precision",
    "softmax",
    "stack",
    "straight_through",
    "tensor",
    "where",
    "zeros",
]
