"""Neural diffusion processes for probabilistic wind-power curve modelling.

The package trains denoising diffusion models over function evaluations
(inputs stay clean, targets are corrupted), optionally conditioned on a
task embedding pooled from context points, and evaluates them against an
exact-inference GP baseline with calibration-aware metrics.
"""

__version__ = "0.1.0"
