"""Tightly coupled GNSS/INS/vision navigation with sky-mask NLOS mitigation.

Library layout:

    geodesy   frames, rotations, gravity
    gnss      observation models, double differencing, stochastic model
    skyview   sky masks, fisheye projection, LOS/NLOS classification,
              classical segmentation baselines
    ins       strapdown mechanization and covariance propagation
    vision    sliding-window stereo constraints (triangulation,
              reprojection Jacobians, null-space marginalization)
    fusion    the tightly coupled error-state filter
    sim       synthetic urban-canyon scenarios and RMSE evaluation
    dataio    file formats and configuration
    pipeline  end-to-end run orchestration
    cli       command-line entry point
"""

__version__ = "0.1.0"
