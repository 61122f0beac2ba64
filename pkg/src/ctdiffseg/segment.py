"""Descriptor clustering to pathology masks.

Clusters carry no semantics by themselves; each one is mapped to a tissue
class by comparing its members' mean HU against clinical attenuation
bands. Patch-grid responsibilities are splatted to voxel masks, boundary
detail is restored by multiplying each mask with image-and-mask
corroborated Sobel edges, and a final per-voxel HU compatibility pass
reassigns physically implausible labels.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .ctdata import CtVolume, PathologyLabel
from .gmm import GmmModel, assign_clusters, fit_gmm
from .inference import extract_corpus

N_CLASSES = len(PathologyLabel)

# Attenuation bands (lo, hi], configurable; boundaries resolve to the
# lower-HU class. Emphysema/healthy split at -860 HU inside their
# overlapping low-attenuation range.
DEFAULT_HU_THRESHOLDS = {
    PathologyLabel.BACKGROUND: (-1024.0, -990.0),
    PathologyLabel.EMPHYSEMA: (-990.0, -860.0),
    PathologyLabel.HEALTHY: (-860.0, -700.0),
    PathologyLabel.GGO: (-700.0, -300.0),
    PathologyLabel.FIBROSIS: (-300.0, 600.0),
}


class SegmentError(ValueError):
    pass


@dataclass
class HuThresholds:
    """Contiguous HU partition of the window, one interval per class."""

    intervals: dict = field(default_factory=lambda: dict(DEFAULT_HU_THRESHOLDS))

    def __post_init__(self):
        self.intervals = {PathologyLabel(k): (float(lo), float(hi))
                          for k, (lo, hi) in self.intervals.items()}
        ordered = sorted(self.intervals.items(), key=lambda kv: kv[1][0])
        for (_, (_, hi_a)), (_, (lo_b, _)) in zip(ordered, ordered[1:]):
            if hi_a != lo_b:
                raise SegmentError(f"intervals must tile contiguously, gap at {hi_a}/{lo_b}")
        self._order = [lab for lab, _ in ordered]
        self._upper = np.array([hi for _, (_, hi) in ordered])

    def label_for_hu(self, hu):
        """Vectorized interval lookup; ties at a boundary go to the lower class."""
        idx = np.searchsorted(self._upper, np.asarray(hu, dtype=np.float64), side="left")
        idx = np.minimum(idx, len(self._order) - 1)
        lut = np.array([int(lab) for lab in self._order], dtype=np.uint8)
        return lut[idx]

    def interval(self, label):
        return self.intervals[PathologyLabel(label)]

    def to_dict(self):
        return {lab.name: list(iv) for lab, iv in self.intervals.items()}

    @staticmethod
    def from_dict(d):
        return HuThresholds({PathologyLabel[k.upper()]: tuple(v) for k, v in d.items()})


@dataclass
class SegmentationResult:
    label_volume: np.ndarray        # (Z, Y, X) uint8 PathologyLabel values
    soft_masks: np.ndarray          # (n_classes, Z, Y, X) float32, refined
    cluster_to_label: dict          # cluster index -> PathologyLabel
    cluster_mean_hu: np.ndarray     # (K,)
    gmm: GmmModel = None
    argmax_labels: np.ndarray = None  # labels before the HU compatibility pass


def hu_label_assignment(model: GmmModel, patch_hu_means, hard_labels,
                        thresholds: HuThresholds):
    """Map each cluster to the class whose band contains its mean member HU."""
    K = model.n_components
    patch_hu_means = np.asarray(patch_hu_means, dtype=np.float64)
    mapping = {}
    mean_hu = np.zeros(K)
    for k in range(K):
        members = hard_labels == k
        if not members.any():
            warnings.warn(f"cluster {k} is empty; assigning Background")
            mapping[k] = PathologyLabel.BACKGROUND
            mean_hu[k] = np.nan
            continue
        h = float(patch_hu_means[members].mean())
        mean_hu[k] = h
        mapping[k] = PathologyLabel(int(thresholds.label_for_hu(h)))
    return mapping, mean_hu


def build_soft_masks(responsibilities, origins, volume_shape, patch_side,
                     cluster_to_label=None):
    """Splat patch responsibilities uniformly over footprints and average.

    `responsibilities` is (N, K) (or hard labels, converted to one-hot).
    With a cluster map, responsibilities of clusters sharing a class are
    summed first; output is one mask per PathologyLabel. Voxels covered
    by no patch fall back to Background mass 1 so per-voxel masks always
    sum to 1.
    """
    resp = np.asarray(responsibilities, dtype=np.float64)
    if resp.ndim == 1:
        onehot = np.zeros((len(resp), int(resp.max()) + 1))
        onehot[np.arange(len(resp)), resp.astype(int)] = 1.0
        resp = onehot
    N, K = resp.shape
    if N != len(origins):
        raise SegmentError(f"{N} responsibility rows but {len(origins)} origins")

    if cluster_to_label is not None:
        class_resp = np.zeros((N, N_CLASSES))
        for k in range(K):
            class_resp[:, int(cluster_to_label[k])] += resp[:, k]
    else:
        if K > N_CLASSES:
            raise SegmentError(f"{K} columns need a cluster_to_label map")
        class_resp = np.zeros((N, N_CLASSES))
        class_resp[:, :K] = resp

    S = patch_side
    acc = np.zeros((N_CLASSES,) + tuple(volume_shape))
    cover = np.zeros(volume_shape)
    for i, (z, y, x) in enumerate(origins):
        if (z < 0 or y < 0 or x < 0 or z + S > volume_shape[0]
                or y + S > volume_shape[1] or x + S > volume_shape[2]):
            raise SegmentError(f"origin {(z, y, x)} outside volume {volume_shape}")
        acc[:, z:z + S, y:y + S, x:x + S] += class_resp[i][:, None, None, None]
        cover[z:z + S, y:y + S, x:x + S] += 1.0
    covered = cover > 0
    masks = np.zeros_like(acc)
    masks[:, covered] = acc[:, covered] / cover[covered]
    masks[int(PathologyLabel.BACKGROUND), ~covered] = 1.0
    return masks.astype(np.float32)


def _minmax(a):
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def sobel_magnitude(vol):
    v = np.asarray(vol, dtype=np.float64)
    g2 = np.zeros_like(v)
    for axis in range(3):
        g = ndimage.sobel(v, axis=axis)
        g2 += g * g
    return np.sqrt(g2)


def sobel_fusion(mask, x0: CtVolume, alpha_s: float = 2.0, sigma: float = 1.5):
    """Boost mask values where image edges and mask edges coincide.

    mask <- mask * (1 + alpha_s * G_sigma(S(x0) * S(mask))); both Sobel
    magnitudes are min-max normalized to [0, 1] first so alpha_s has a
    scale-free meaning. Never decreases a mask value.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x0.voxels.shape:
        raise SegmentError(f"mask shape {mask.shape} != volume shape {x0.voxels.shape}")
    s_img = _minmax(sobel_magnitude(x0.voxels))
    s_mask = _minmax(sobel_magnitude(mask))
    boost = ndimage.gaussian_filter(s_img * s_mask, sigma=sigma)
    return mask * (1.0 + alpha_s * boost)


def hu_compatibility_filter(label_volume, x0: CtVolume, thresholds: HuThresholds,
                            margin: float = 25.0):
    """Reassign voxels whose HU falls outside the assigned class band.

    The assigned class keeps a voxel when its HU lies inside the class
    interval widened by +-margin; otherwise the voxel moves to the class
    whose raw interval contains its HU. Idempotent.
    """
    labels = np.asarray(label_volume).astype(np.uint8).copy()
    hu = x0.voxels.astype(np.float64)
    for lab in PathologyLabel:
        lo, hi = thresholds.interval(lab)
        sel = labels == int(lab)
        if not sel.any():
            continue
        bad = sel & ((hu < lo - margin) | (hu > hi + margin))
        if bad.any():
            labels[bad] = thresholds.label_for_hu(hu[bad])
    return labels


@dataclass
class SegmentOptions:
    grid_stride: int = 16
    timesteps: tuple = (50, 100, 150, 200)
    n_clusters: int = 5
    gmm_seed: int = 0
    noise_seed: int = 0
    thresholds: HuThresholds = field(default_factory=HuThresholds)
    alpha_s: float = 2.0
    sobel_sigma: float = 1.5
    compat_margin: float = 25.0
    fusion: bool = True
    hu_filter: bool = True
    extraction_mode: str = "forward"
    gmm_max_iter: int = 200
    gmm_tol: float = 1e-6


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as e:
        raise SegmentError(f"stage {name}: {e}") from e


def segment_volume(volume: CtVolume, ckpt, opts: SegmentOptions = None) -> SegmentationResult:
    """Full pipeline: features, GMM, HU labeling, masks, fusion, HU filter."""
    opts = opts or SegmentOptions()
    S = ckpt.patch_side

    descs = _stage("extract_corpus", extract_corpus, volume, ckpt,
                   opts.grid_stride, noise_seed=opts.noise_seed,
                   timesteps=opts.timesteps, mode=opts.extraction_mode)
    D = np.stack([d.values for d in descs])
    origins = [d.origin_index for d in descs]

    model = _stage("fit_gmm", fit_gmm, D, K=opts.n_clusters, seed=opts.gmm_seed,
                   max_iter=opts.gmm_max_iter, tol=opts.gmm_tol)
    hard, resp = _stage("assign_clusters", assign_clusters, model, D)

    patch_hu = np.array([
        volume.voxels[z:z + S, y:y + S, x:x + S].mean() for z, y, x in origins
    ])
    mapping, mean_hu = _stage("hu_label_assignment", hu_label_assignment,
                              model, patch_hu, hard, opts.thresholds)

    masks = _stage("build_soft_masks", build_soft_masks, resp, origins,
                   volume.voxels.shape, S, cluster_to_label=mapping)

    if opts.fusion:
        refined = np.stack([
            _stage("sobel_fusion", sobel_fusion, masks[c], volume,
                   alpha_s=opts.alpha_s, sigma=opts.sobel_sigma)
            for c in range(N_CLASSES)
        ])
    else:
        refined = masks.astype(np.float64)

    argmax_labels = refined.argmax(axis=0).astype(np.uint8)
    labels = argmax_labels
    if opts.hu_filter:
        labels = _stage("hu_compatibility_filter", hu_compatibility_filter,
                        argmax_labels, volume, opts.thresholds, opts.compat_margin)

    return SegmentationResult(
        label_volume=labels,
        soft_masks=refined.astype(np.float32),
        cluster_to_label={k: PathologyLabel(int(v)) for k, v in mapping.items()},
        cluster_mean_hu=mean_hu,
        gmm=model,
        argmax_labels=argmax_labels,
    )
