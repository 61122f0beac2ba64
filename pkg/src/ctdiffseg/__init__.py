"""Radiomic-distilled 3D diffusion features for unsupervised lung CT segmentation.

Pipeline: HU-preserved patches train a 3D denoising diffusion U-Net whose
256-channel bottleneck is shaped by a frozen radiomic teacher through a
contrastive objective; frozen-model multi-timestep features are clustered
by a full-covariance GMM, labeled by cluster mean HU against clinical
attenuation bands, and refined by Sobel-gradient fusion plus a per-voxel
HU compatibility check.
"""

from .ctdata import (
    CtVolume,
    NormalizedVolume,
    Patch,
    PathologyLabel,
    PhantomRegion,
    PhantomSpec,
    DEFAULT_WINDOW,
    generate_phantom,
    load_volume,
    save_volume,
    normalize_hu,
    denormalize_hu,
    sample_patches,
)

__version__ = "0.1.0"
