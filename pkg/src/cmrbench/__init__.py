"""Desk-scale benchmark for mask-conditioned cardiac MRI synthesis.

Procedural two-domain phantoms stand in for real cine-MR slices; three
generator families (pixel-space diffusion, latent diffusion, flow matching)
are trained to synthesize images from segmentation masks and compared on
image fidelity, downstream segmentation utility and privacy leakage.
"""

__version__ = "0.1.0"

from .core import CLASS_NAMES, N_CLASSES, Dataset, DatasetItem, DomainProfile, Image, LabelMask

__all__ = [
    "CLASS_NAMES",
    "N_CLASSES",
    "Dataset",
    "DatasetItem",
    "DomainProfile",
    "Image",
    "LabelMask",
    "__version__",
]
