"""Final-infarct prediction from native CT perfusion at desk scale.

Synthetic phantom cohorts with known tissue fate, the classical
SVD-deconvolution baseline, a from-scratch multi-pathway voxelwise
network with treatment-metadata conditioning, evaluation harness,
and an HTTP scenario-exploration service.
"""

__version__ = "0.1.0"
