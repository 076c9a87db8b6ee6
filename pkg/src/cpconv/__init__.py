"""cpconv: CP-factorized convolution layers for CPU speedups.

Decompose a 4D convolution kernel into a sum of rank-one tensors, rewrite
the layer as a stack of four cheap convolutions (1x1, dx1 channel-wise,
1xd channel-wise, 1x1), fine-tune the surrounding network, and measure the
error/speed/size trade-offs.

Submodules
----------
tensor_ops   dense tensor primitives (outer products, unfolding, Khatri-Rao)
cpt1         binary tensor file format
cp           CP decomposition solvers (ALS, Gauss-Newton NLS, greedy)
rewrite      kernel factorization, four-layer stack construction, cost model
nn           minimal CNN runtime: forward/backward/SGD training
data         synthetic labeled datasets
model_io     network persistence (manifest + tensor blobs)
bench        timing, rank sweeps, method comparison tables
cli          command-line entry points

The top-level package deliberately imports nothing heavyweight; import the
submodule you need (``from cpconv import cp``).
"""

__version__ = "0.1.0"
