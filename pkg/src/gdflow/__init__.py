"""Operator-level analysis of gradient-descent learning in recurrent models.

The package decomposes each learning step into the flow propagator (how
per-step perturbations move the hidden state), the parameter operator
(how error signals filter through parameter space), and their composition,
all as matrix-free maps on [trial, time, unit] tensors, with spectral tools,
task generators, a trainer, and a CLI for the packaged experiments.
"""

__version__ = "0.1.0"

from .trajspace import Traj3, axis_set, cosine_sim, effdim, inner, norm, restrict

__all__ = ["Traj3", "axis_set", "cosine_sim", "effdim", "inner", "norm",
           "restrict", "__version__"]
