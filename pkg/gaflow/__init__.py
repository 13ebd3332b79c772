""" gaflow: gated appearance flow virtual try-on on a small numpy autodiff engine. """
from .pipeline import ModelSettings, StageOutputs, ZFlow
from .sample import TryOnBatch, TryOnSample, collate
from .tensor import Tape, Tensor, backward, no_grad, precision, set_precision

__version__ = "0.1.0"
