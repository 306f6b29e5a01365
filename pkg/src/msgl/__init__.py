"""Multi-scale graph learning for stream temperature downscaling.

Submodules: ``autodiff`` (tape engine), ``stream_graph`` (graphs and the
cross-scale matrix), ``model`` (RGrN embedding and task heads), ``mso``
(min-norm gradient weighting), ``pipeline`` (training drivers), ``data_io``
(CSV loading, scaling, label masking), ``synth`` (synthetic basins),
``evaluation`` (RMSE and Welch's test) and ``cli``.
"""
__version__ = "0.1.0"

from . import autodiff, data_io, evaluation, kernels, model, mso, pipeline, stream_graph, synth
from .errors import (ConfigError, ContractError, DimensionError, MSGLError, NumericError,
                     ValidationError)

__all__ = ["autodiff", "data_io", "evaluation", "kernels", "model", "mso", "pipeline",
           "stream_graph", "synth", "MSGLError", "DimensionError", "ContractError",
           "ValidationError", "ConfigError", "NumericError", "__version__"]
