from .base import DivergenceError, ForwardTrace, ModelBase, readout
from .gru import GruModel, GruParams, gru_init
from .hh import HhModel, HhParams, hh_init, hh_rest_state
from .rnn import RnnModel, RnnParams, rnn_init

__all__ = [
    "DivergenceError", "ForwardTrace", "ModelBase", "readout",
    "RnnModel", "RnnParams", "rnn_init",
    "GruModel", "GruParams", "gru_init",
    "HhModel", "HhParams", "hh_init", "hh_rest_state",
]
