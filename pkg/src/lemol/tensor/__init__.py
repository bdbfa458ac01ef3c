"""Minimal reverse-mode autodiff and the network pieces built on it."""

from .autodiff import Tape, Tensor, active_tape, one_hot
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .nn import (
    LstmState,
    bilstm_encode,
    dense_forward,
    init_bilstm,
    init_dense,
    init_lstm,
    init_mlp,
    lstm_step,
    mlp_forward,
    softmax,
)
from .params import AdamState, ParamStore, adam_step, polyak_update

__all__ = [
    "AdamState",
    "CheckpointError",
    "LstmState",
    "ParamStore",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "bilstm_encode",
    "dense_forward",
    "grad_check",
    "init_bilstm",
    "init_dense",
    "init_lstm",
    "init_mlp",
    "load_checkpoint",
    "lstm_step",
    "mlp_forward",
    "one_hot",
    "polyak_update",
    "save_checkpoint",
    "softmax",
]
