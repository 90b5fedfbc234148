from .autograd import (
    DimensionError, FaultError, Parameter, Tape, Tensor, add, backward, concat, cross_entropy,
    div, dropout, embedding, exp, getitem, is_grad_enabled, layer_norm, linear, lift, log,
    log_softmax, matmul, mul, no_grad, power, relu, reshape, softmax, sub, tanh, tmean, transpose,
    tsum,
)
from .gradcheck import check_module_gradients, finite_diff_grad, relative_error
from .nn import (
    Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, additive_mask,
    causal_keep, padding_keep, parameter_hash,
)
from .optim import Adam, AdamState, noam_lr
