"""Minimal dense-tensor core with reverse-mode autodiff and the layers the pipeline needs."""
from .tensor import (
    ShapeError, Tensor, abs_, add, as_tensor, backward, clip, concat, cos, div, exp, getitem, keep_where,
    layernorm, log, matmul, mean, mul, neg, no_grad, relu, reshape, sigmoid, sin, slice_, softmax,
    sqrt, square, stack, sub, sum_, take, transpose,
)
from .functional import (
    attention_weights, avg_pool2, binary_cross_entropy, conv2d, cross_attention, feed_forward,
    grid_sample_bilinear, init_layernorm, init_linear, init_transformer_stack, l1, linear, multi_head_attention, self_attention, soft_argmax_3d,
    transformer_block, transformer_stack,
)
from .optim import CheckpointError, ParamStore, adam_step, read_checkpoint, save_checkpoint
