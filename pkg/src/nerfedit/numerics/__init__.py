"""Reverse-mode autodiff tensors, tape, and the Adam optimizer."""

from .engine import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    affine,
    backward,
    broadcast_to,
    col2im,
    combine,
    concat,
    cumsum,
    detach,
    film_sin,
    flip,
    grad_of,
    im2col,
    map_unary,
    matmul,
    no_grad,
    parameter,
    reduce,
    reshape,
    rng,
    set_check_finite,
    slice_,
    spawn_seeds,
    tape,
    tensor,
    transpose,
)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "NumericError", "ShapeError", "Tape", "Tensor", "active_tape", "affine",
    "backward", "broadcast_to", "col2im", "combine", "concat", "cumsum",
    "detach", "film_sin", "flip", "grad_of", "im2col", "map_unary", "matmul",
    "no_grad", "parameter", "reduce", "reshape", "rng", "set_check_finite",
    "slice_", "spawn_seeds", "tape", "tensor", "transpose",
    "Adam", "AdamState", "adam_step",
]
