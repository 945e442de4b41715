"""Learnable sinc filterbank frontend, hand-differentiated neural layers, and a
dialog-level emotion decoder, all in numpy."""

from . import data_io, ded, dsp_core, layers, models, training

__all__ = ["data_io", "ded", "dsp_core", "layers", "models", "training"]
__version__ = "0.1.0"
