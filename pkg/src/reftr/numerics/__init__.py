"""Reverse-mode autodiff on numpy arrays, plus optimizer, init and checkpoint IO."""
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .init import xavier_init
from .nn import (Conv2d, EncoderLayer, FeedForward, LayerNorm, Linear, MLP, Module,
                 MultiHeadAttention, Parameter, key_padding_bias)
from .optim import AdamState, AdamW, adamw_step
from .tensor import (Tape, Tensor, abs_, add, as_tensor, avgpool2x, clip, concat, conv2d, current_tape,
                     div, embedding, exp, float64_mode, gelu, get_default_dtype, getitem, layer_norm, log,
                     matmul, maximum, mean, minimum, mul, power, relu, reshape, scale, sigmoid, softmax,
                     sqrt, stack, sub, sum_, tanh, transpose, upsample2x_nearest)
