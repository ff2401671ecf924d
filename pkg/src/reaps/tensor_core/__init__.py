from .tensor import (
    Function,
    ShapeError,
    Tensor,
    backward,
    concat,
    is_grad_enabled,
    no_grad,
    relu,
    sigmoid,
    stack,
    tanh,
)
from .nn import (
    LSTMParams,
    avg_pool_rect,
    bilinear_resize,
    conv2d,
    global_avg_pool,
    linear,
    lstm_cell,
    max_pool2d,
    softmax_cross_entropy,
)
from .optim import SGD, OptimizerState, sgd_momentum_step
from .gradcheck import GradcheckReport, gradcheck

__all__ = [
    "Function",
    "GradcheckReport",
    "LSTMParams",
    "OptimizerState",
    "SGD",
    "ShapeError",
    "Tensor",
    "avg_pool_rect",
    "backward",
    "bilinear_resize",
    "concat",
    "conv2d",
    "global_avg_pool",
    "gradcheck",
    "is_grad_enabled",
    "linear",
    "lstm_cell",
    "max_pool2d",
    "no_grad",
    "relu",
    "sgd_momentum_step",
    "sigmoid",
    "softmax_cross_entropy",
    "stack",
    "tanh",
]
