"""Bayesian CT reconstruction over the latent space of a generative prior.

Subpackages and modules:

- ``forward_model``: Radon transform, FBP baseline, noise model, phantoms
- ``network``: weight-file runtime (forward, VJP, spectral tooling)
- ``sampler``: pCN / HMC / HMC-pCN kernels and the chain driver
- ``analysis``: posterior summaries, PSNR/SSIM, HPDI, MMD, diagnostics
- ``cli``: the ``latentmc`` command-line pipeline
"""

__version__ = "0.1.0"
