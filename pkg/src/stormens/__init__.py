"""stormens: generative-ensemble severe weather post-processing at desk scale.

Subpackages/modules
-------------------
griddata       fine/coarse grids, patch indexing, report gridding, climatology
normalize      per-predictor normalizations and their inverses
stormgen       seeded synthetic archives with a known label law
neural         layer forward/backward passes, losses, Adam, gradient checks
kernels        compiled (or NumPy) convolution gather/scatter core
cgan           conditional GANs that synthesize predictor ensembles
severe_models  CNN encoder/classifier and the MLP baseline
ensembles      CGAN / CNN / MLP ensemble prediction
verification   Brier-score family, uncertainty and importance metrics
pipeline       experiment orchestration; cli exposes it as subcommands
"""

__version__ = "0.1.0"
