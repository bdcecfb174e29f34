"""tomoheight: forest canopy height estimation from tomographic SAR cubes.

Pipeline stages: synthetic scene generation (or file ingest), geographic
splitting, single-pixel tabular baselines, volumetric CNN regression with
three z-collapse heads, Bayesian hyperparameter sweeps, and full-scene
reconstruction with resolution-normalized evaluation.
"""

__version__ = "0.1.0"
