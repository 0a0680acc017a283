"""Field-decomposed hyper-reduced order modeling of damage-plasticity FEM.

Library layout:

- :mod:`hyperred.linalg` -- thin SVD, sparse NNLS
- :mod:`hyperred.mesh` -- meshes, DOF layouts, desk geometries
- :mod:`hyperred.material` -- gradient-extended damage-plasticity
- :mod:`hyperred.assembly` -- element kernels, full/subset assembly
- :mod:`hyperred.fom` -- Newton + arc-length continuation, snapshots
- :mod:`hyperred.dpod` -- field-decomposed POD reduction
- :mod:`hyperred.ddeim` -- field-decomposed empirical interpolation
- :mod:`hyperred.decsw` -- field-decomposed element sampling/weighting
- :mod:`hyperred.metrics` -- curve error / timing / selection statistics
- :mod:`hyperred.optimize` -- limit-load width optimization (Brent)
- :mod:`hyperred.report` -- figure rendering for run artifacts
- :mod:`hyperred.cli` -- batch command-line interface
"""

__version__ = "0.1.0"
