"""cuclgen: compute graphs -> specialized GPU convolution kernels.

Networks are parsed into a compute graph, lowered through string-template
metaprogramming into CUCL (the CUDA/OpenCL intersection language), executed on
a deterministic simulated SIMT backend, and autotuned by brute-force sweeps
over blocking/vectorization parameters.
"""

__version__ = "0.1.0"

from .errors import CuclgenError

__all__ = ["CuclgenError", "__version__"]
