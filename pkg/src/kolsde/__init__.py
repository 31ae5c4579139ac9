"""kolsde: linear Kolmogorov PDE solvers built on SDE-based variational losses.

Subpackages/modules map to the pipeline: ``autodiff`` (tape + forward mode),
``nets`` (model families), ``sde`` (problems and path simulation), ``losses``
(the six loss/gradient estimators), ``train`` (Adam loop and schedules),
``evaluation`` (references, metrics, variance diagnostics) and ``cli``
(experiment orchestration).
"""

__version__ = "0.1.0"
