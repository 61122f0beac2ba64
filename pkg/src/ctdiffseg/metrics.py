"""Segmentation and generation quality metrics.

DSC / HD95 operate on binary masks (volumetric or per-axial-slice); HD95
is the 95th percentile of symmetric surface distances in mm. SSIM follows
the standard 11-wide Gaussian window form, computed per axial slice and
averaged; PSNR is reported over an explicit data range. Generation
fidelity uses a declared Frechet-distance proxy on model features with
shrinkage-regularized covariances (not a pretrained-classifier FID).
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, ndimage


class MetricError(ValueError):
    pass


# -- overlap ------------------------------------------------------------------

def dice(pred, gt) -> float:
    """2|P&G| / (|P|+|G|); both-empty masks score 1 by convention."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p, g = pred.sum(), gt.sum()
    if p + g == 0:
        return 1.0
    return float(2.0 * (pred & gt).sum() / (p + g))


# -- surface distances ----------------------------------------------------------

def surface_mask(mask) -> np.ndarray:
    """Voxels of the mask with an axis-neighbor outside it (volume border counts)."""
    mask = np.asarray(mask).astype(bool)
    interior = ndimage.binary_erosion(
        mask, structure=ndimage.generate_binary_structure(mask.ndim, 1),
        border_value=0)
    return mask & ~interior


def hd95(pred, gt, spacing) -> float:
    """95th percentile of the symmetric surface-distance set, in mm."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        raise MetricError("undefined HD95: empty mask")
    if len(spacing) != pred.ndim:
        raise MetricError(f"spacing {spacing} does not match mask ndim {pred.ndim}")

    sp = surface_mask(pred)
    sg = surface_mask(gt)
    d_to_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    d_to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    dists = np.concatenate([d_to_g[sp], d_to_p[sg]])
    return float(np.percentile(dists, 95))


# -- image similarity -------------------------------------------------------------

def _gaussian_kernel2d(size=11, sigma=1.5):
    half = size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    k = np.exp(-(x ** 2 + y ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def ssim(a, b, data_range: float = 1624.0) -> float:
    """Mean SSIM over axial slices, 11x11 Gaussian window, interior only."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    K = _gaussian_kernel2d()
    half = 5
    C1 = (0.01 * data_range) ** 2
    C2 = (0.03 * data_range) ** 2
    vals = []
    for z in range(a.shape[0]):
        sa, sb = a[z], b[z]
        mu_a = ndimage.correlate(sa, K, mode="reflect")
        mu_b = ndimage.correlate(sb, K, mode="reflect")
        va = ndimage.correlate(sa * sa, K, mode="reflect") - mu_a ** 2
        vb = ndimage.correlate(sb * sb, K, mode="reflect") - mu_b ** 2
        cov = ndimage.correlate(sa * sb, K, mode="reflect") - mu_a * mu_b
        m = ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) \
            / ((mu_a ** 2 + mu_b ** 2 + C1) * (va + vb + C2))
        vals.append(m[half:-half, half:-half].mean())
    return float(np.mean(vals))


def psnr(a, b, data_range: float = 1624.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(data_range ** 2 / mse))


# -- Frechet distance proxy ---------------------------------------------------------

def _shrunk_cov(F, shrinkage):
    cov = np.cov(F, rowvar=False)
    cov = np.atleast_2d(cov)
    d = cov.shape[0]
    return (1.0 - shrinkage) * cov + shrinkage * (np.trace(cov) / d) * np.eye(d)


def frechet_proxy(F_real, F_gen, shrinkage: float = 0.1) -> float:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)) on shrunk covariances.

    Declared proxy: features come from the trained model, not a pretrained
    classifier, and covariances are shrunk toward a scaled identity so the
    square root is stable when N is modest relative to d.
    """
    F_real = np.asarray(F_real, dtype=np.float64)
    F_gen = np.asarray(F_gen, dtype=np.float64)
    if F_real.ndim != 2 or F_gen.ndim != 2 or F_real.shape[1] != F_gen.shape[1]:
        raise MetricError(
            f"feature dims disagree: {F_real.shape} vs {F_gen.shape}")
    if len(F_real) < 2 or len(F_gen) < 2:
        raise MetricError("need at least 2 feature rows per set")

    mu1, mu2 = F_real.mean(axis=0), F_gen.mean(axis=0)
    s1 = _shrunk_cov(F_real, shrinkage)
    s2 = _shrunk_cov(F_gen, shrinkage)
    covmean = linalg.sqrtm(s1 @ s2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    val = float(((mu1 - mu2) ** 2).sum() + np.trace(s1 + s2 - 2.0 * covmean))
    return max(val, 0.0) if abs(val) < 1e-6 else val


# -- reports ----------------------------------------------------------------------

def _finite_or_none(x):
    if x is None:
        return None
    return float(x) if np.isfinite(x) else None


@dataclass
class MetricReport:
    per_class_dsc: dict = field(default_factory=dict)   # class name -> DSC
    per_class_hd95: dict = field(default_factory=dict)  # class name -> mm or None
    mean_dsc: float = None
    mean_hd95: float = None
    ssim: float = None
    psnr: float = None
    frechet_proxy: float = None
    data_range: float = 1624.0
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "per_class_dsc": {k: float(v) for k, v in self.per_class_dsc.items()},
            "per_class_hd95": {k: _finite_or_none(v) for k, v in self.per_class_hd95.items()},
            "mean_dsc": _finite_or_none(self.mean_dsc),
            "mean_hd95": _finite_or_none(self.mean_hd95),
            "ssim": _finite_or_none(self.ssim),
            "psnr": "+inf" if self.psnr is not None and math.isinf(self.psnr)
                    else _finite_or_none(self.psnr),
            "frechet_proxy": _finite_or_none(self.frechet_proxy),
            "data_range": self.data_range,
            "notes": self.notes,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_labels(pred_labels, gt_labels, spacing, class_names) -> MetricReport:
    """Per-class DSC and HD95 against ground truth labels.

    `class_names` maps integer label -> display name; classes absent from
    both volumes score DSC 1; HD95 is None when either mask is empty.
    """
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise MetricError("label volumes differ in shape")
    report = MetricReport()
    dscs, hds = [], []
    for value, name in class_names.items():
        p = pred_labels == value
        g = gt_labels == value
        d = dice(p, g)
        report.per_class_dsc[name] = d
        dscs.append(d)
        try:
            h = hd95(p, g, spacing)
            hds.append(h)
        except MetricError:
            h = None
        report.per_class_hd95[name] = h
    report.mean_dsc = float(np.mean(dscs)) if dscs else None
    report.mean_hd95 = float(np.mean(hds)) if hds else None
    return report


def report_table_csv(rows, path=None):
    """Rows of (method, report) to a CSV table: per-class DSC then mean HD95."""
    if not rows:
        raise MetricError("no rows to tabulate")
    classes = list(rows[0][1].per_class_dsc.keys())
    lines = [",".join(["method"] + [f"dsc_{c}" for c in classes]
                      + ["mean_dsc", "mean_hd95"])]
    for method, rep in rows:
        cells = [method]
        cells += [f"{rep.per_class_dsc[c]:.4f}" for c in classes]
        cells.append("" if rep.mean_dsc is None else f"{rep.mean_dsc:.4f}")
        cells.append("" if rep.mean_hd95 is None else f"{rep.mean_hd95:.4f}")
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text
