"""perft-lab: a desk-scale laboratory for parameter-efficient fine-tuning
of mixture-of-experts transformers.

Pure numpy/scipy, float64, deterministic by seed. The library exposes the
routed backbone (moe, model), the PEFT wirings and their exact parameter
accounting (peft), training and evaluation (training), synthetic tasks
(data), routing-geometry analysis (analysis), and a checkpoint format
(checkpoint). A thin CLI (cli) drives the same code paths.

PERFT_LAB_THREADS caps the BLAS thread pools. It must be set before numpy is
first imported to take effect; importing perft_lab before numpy is enough.
"""

import os as _os

if "PERFT_LAB_THREADS" in _os.environ:
    _n = _os.environ["PERFT_LAB_THREADS"]
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        _os.environ.setdefault(_var, _n)

from . import analysis, checkpoint, config, data, moe, numerics, peft, training  # noqa: E402
from . import model  # noqa: E402
from .numerics import (  # noqa: E402
    ConfigError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    InputError,
    NumericError,
    Parameter,
    ParseError,
    PerftLabError,
    Rng,
)

__version__ = "0.1.0"

__all__ = [
    "analysis", "checkpoint", "config", "data", "model", "moe", "numerics",
    "peft", "training",
    "Parameter", "Rng", "PerftLabError", "ConfigError", "DimensionError",
    "NumericError", "DomainError", "DegenerateInputError", "InputError",
    "ParseError", "__version__",
]
