"""Comparison baselines: clustering without the distilled representation."""

import numpy as np

from .ctdata import CtVolume, Patch, PathologyLabel
from .gmm import GmmModel, assign_clusters, fit_gmm, kmeanspp_centers
from .radiomics import radiomic_vector
from .segment import HuThresholds, SegmentationResult, build_soft_masks, hu_label_assignment


def kmeans(X, K, seed=0, max_iter=100):
    """Plain Lloyd iterations from a k-means++ start; returns hard labels."""
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = kmeanspp_centers(X, K, rng)
    labels = np.zeros(len(X), dtype=int)
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
        for k in range(K):
            sel = labels == k
            if sel.any():
                centers[k] = X[sel].mean(axis=0)
    return labels


def _grid_patches(volume: CtVolume, side, stride):
    Z, Y, X = volume.voxels.shape
    out = []
    for z in range(0, Z - side + 1, stride):
        for y in range(0, Y - side + 1, stride):
            for x in range(0, X - side + 1, stride):
                out.append(Patch(volume.voxels[z:z + side, y:y + side, x:x + side],
                                 (z, y, x)))
    return out


def _labels_from_hard(volume, patches, hard, K, thresholds, seed_note):
    patch_hu = np.array([p.voxels.mean() for p in patches])
    from .gmm import GmmModel
    dummy = GmmModel(weights=np.full(K, 1.0 / K), means=np.zeros((K, 1)),
                     covariances=np.stack([np.eye(1)] * K))
    mapping, mean_hu = hu_label_assignment(dummy, patch_hu, hard, thresholds)
    origins = [p.origin_index for p in patches]
    masks = build_soft_masks(hard, origins, volume.voxels.shape, patches[0].side,
                             cluster_to_label=mapping)
    labels = masks.argmax(axis=0).astype(np.uint8)
    return SegmentationResult(
        label_volume=labels,
        soft_masks=masks,
        cluster_to_label={k: PathologyLabel(int(v)) for k, v in mapping.items()},
        cluster_mean_hu=mean_hu,
        argmax_labels=labels,
    )


def kmeans_radiomics_segment(volume: CtVolume, side: int, stride: int, K: int = 5,
                             seed: int = 0, thresholds: HuThresholds = None
                             ) -> SegmentationResult:
    """K-means on raw 34-d radiomic vectors; no diffusion features, no refinement."""
    thresholds = thresholds or HuThresholds()
    patches = _grid_patches(volume, side, stride)
    X = np.stack([radiomic_vector(p).values for p in patches])
    hard = kmeans(X, K, seed=seed)
    return _labels_from_hard(volume, patches, hard, K, thresholds, "kmeans")


def undistilled_gmm_segment(volume: CtVolume, ckpt, stride: int, K: int = 5,
                            seed: int = 0, noise_seed: int = 0,
                            timesteps=(50, 100, 150, 200),
                            thresholds: HuThresholds = None) -> SegmentationResult:
    """GMM on pooled bottleneck features only (the 256-d block of the descriptor).

    Meaningful with a checkpoint trained without the contrastive term:
    diffusion features alone, no radiomic shaping, no refinement.
    """
    from .inference import extract_corpus
    thresholds = thresholds or HuThresholds()
    descs = extract_corpus(volume, ckpt, stride, noise_seed=noise_seed,
                           timesteps=timesteps)
    F = np.stack([d.values[128:] for d in descs])
    model = fit_gmm(F, K=K, seed=seed)
    hard, resp = assign_clusters(model, F)
    origins = [d.origin_index for d in descs]
    S = ckpt.patch_side
    patch_hu = np.array([
        volume.voxels[z:z + S, y:y + S, x:x + S].mean() for z, y, x in origins
    ])
    mapping, mean_hu = hu_label_assignment(model, patch_hu, hard, thresholds)
    masks = build_soft_masks(resp, origins, volume.voxels.shape, S,
                             cluster_to_label=mapping)
    labels = masks.argmax(axis=0).astype(np.uint8)
    return SegmentationResult(
        label_volume=labels,
        soft_masks=masks,
        cluster_to_label={k: PathologyLabel(int(v)) for k, v in mapping.items()},
        cluster_mean_hu=mean_hu,
        gmm=model,
        argmax_labels=labels,
    )
