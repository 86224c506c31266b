"""Composed adversarial perturbations (additive, affine, flow) on a small numpy classifier."""

__version__ = "0.1.0"
