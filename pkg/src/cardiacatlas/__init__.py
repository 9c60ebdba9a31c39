"""Cardiac 4-chamber atlas segmentation and interpretable disease diagnosis.

Library layout:

- ``phantom``     synthetic 4-chamber phantom datasets (generation, persistence)
- ``transforms``  stationary-velocity-field exponentiation, affine handling,
                  differentiable warping, smoothness penalty
- ``networks``    segmentation UNet with stochastic head, atlas-to-image mapper,
                  disease branch, learnable atlas
- ``losses``      the five training loss terms and their weighted combination
- ``training``    optimization loop, checkpointing, atlas export
- ``features``    area-ratio feature extraction from label maps
- ``classifiers`` logistic regression and GP-Laplace diagnostic models
- ``evaluation``  Dice / AUC / F1 metrics, experiment grid, reports
- ``cli``         the ``cardiac-atlas`` command-line entry point
"""

__version__ = "0.1.0"

CLASS_NAMES = ("BG", "LA", "RA", "LV", "RV", "WH")
N_CLASSES = len(CLASS_NAMES)
