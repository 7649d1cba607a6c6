"""Convolutional network training, ANN-to-SNN conversion, spiking simulation and STDP."""
from spikeforge.backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
