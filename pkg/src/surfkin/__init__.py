"""Kinematic pipeline for deformable free-form surfaces.

Library layout:

- :mod:`surfkin.geometry` -- meshes, closest-point queries, ICP, smoothness
- :mod:`surfkin.bspline` -- B-spline surfaces: evaluation, fitting, gradients
- :mod:`surfkin.rbf` -- RBF space warping and its analytic gradients
- :mod:`surfkin.nn` -- minimal MLP with exact backprop and input Jacobians
- :mod:`surfkin.oracle` -- synthetic deformable-mannequin ground truth
- :mod:`surfkin.fk` -- forward-kinematics surrogate on control-point deltas
- :mod:`surfkin.sim2real` -- warp-coefficient prediction and calibration
- :mod:`surfkin.ik` -- analytic-gradient inverse-kinematics solver
- :mod:`surfkin.report` -- CSV + figure emission for pipeline reports
- :mod:`surfkin.cli` -- command-line orchestration
"""

__version__ = "0.1.0"
