"""Radiomic teacher: 34-d handcrafted descriptor and its projection head.

Feature layout is fixed: [GLCM 0-13 | LBP 14-21 | Gabor 22-29 | first-order
30-33]. GLCM, LBP, and Gabor are invariant to a global HU shift of the
patch; the first-order mean shifts by exactly that constant. The teacher
head is seeded once and frozen: it is a fixed function of the physics
descriptors and never receives gradient.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .ctdata import Patch

N_GLCM = 14
N_LBP = 8
N_GABOR = 8
N_FIRSTORDER = 4
N_FEATURES = N_GLCM + N_LBP + N_GABOR + N_FIRSTORDER

FAMILY_SLICES = {
    "glcm": slice(0, 14),
    "lbp": slice(14, 22),
    "gabor": slice(22, 30),
    "firstorder": slice(30, 34),
}

GLCM_LEVELS = 32
GLCM_OFFSETS = ((1, 0, 0), (0, 1, 0), (0, 0, 1))

GABOR_FREQUENCIES = (0.1, 0.2)           # cycles/voxel
GABOR_ORIENTATIONS = (0.0, 45.0, 90.0, 135.0)  # degrees

EMBED_DIM = 128


class FeatureError(ValueError):
    pass


# ---------------------------------------------------------------------------
# GLCM / Haralick
# ---------------------------------------------------------------------------

def quantize_patch(voxels: np.ndarray, levels: int) -> np.ndarray:
    """Quantize to gray bins over the patch's own min-max range (shift invariant)."""
    v = voxels.astype(np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.shape, dtype=np.int64)
    q = np.floor((v - lo) / (hi - lo) * levels).astype(np.int64)
    return np.clip(q, 0, levels - 1)


def cooccurrence_matrix(q: np.ndarray, levels: int, offset) -> np.ndarray:
    """Symmetrized, normalized gray-level co-occurrence matrix for one offset."""
    dz, dy, dx = offset
    Z, Y, X = q.shape
    a = q[max(0, -dz):Z - max(0, dz), max(0, -dy):Y - max(0, dy), max(0, -dx):X - max(0, dx)]
    b = q[max(0, dz):Z - max(0, -dz), max(0, dy):Y - max(0, -dy), max(0, dx):X - max(0, -dx)]
    pairs = a.ravel() * levels + b.ravel()
    counts = np.bincount(pairs, minlength=levels * levels).reshape(levels, levels)
    counts = counts + counts.T
    total = counts.sum()
    if total == 0:
        raise FeatureError(f"offset {offset} admits no voxel pairs in shape {q.shape}")
    return counts.astype(np.float64) / total


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def haralick_features(P: np.ndarray) -> np.ndarray:
    """The 14 Haralick descriptors of one normalized co-occurrence matrix.

    Gray levels are 0-based indices. Correlation-type terms (correlation,
    the two information measures, and the max correlation coefficient)
    are 0 by convention when the marginal distribution is degenerate.
    """
    L = P.shape[0]
    i = np.arange(L, dtype=np.float64)
    px = P.sum(axis=1)
    py = P.sum(axis=0)
    mu_x = float((i * px).sum())
    mu_y = float((i * py).sum())
    var_x = float(((i - mu_x) ** 2 * px).sum())
    var_y = float(((i - mu_y) ** 2 * py).sum())
    sd_x, sd_y = np.sqrt(var_x), np.sqrt(var_y)

    ii, jj = np.meshgrid(i, i, indexing="ij")
    diff = np.abs(ii - jj).astype(np.int64)
    ssum = (ii + jj).astype(np.int64)
    p_sum = np.bincount(ssum.ravel(), weights=P.ravel(), minlength=2 * L - 1)
    p_diff = np.bincount(diff.ravel(), weights=P.ravel(), minlength=L)
    k_sum = np.arange(2 * L - 1, dtype=np.float64)
    k_diff = np.arange(L, dtype=np.float64)

    asm = float((P ** 2).sum())
    contrast = float((k_diff ** 2 * p_diff).sum())
    if sd_x > 0 and sd_y > 0:
        correlation = float((((ii - mu_x) * (jj - mu_y)) * P).sum() / (sd_x * sd_y))
    else:
        correlation = 0.0
    sum_of_squares = var_x
    idm = float((P / (1.0 + (ii - jj) ** 2)).sum())
    sum_average = float((k_sum * p_sum).sum())
    sum_variance = float(((k_sum - sum_average) ** 2 * p_sum).sum())
    sum_entropy = _entropy(p_sum)
    entropy = _entropy(P.ravel())
    diff_average = float((k_diff * p_diff).sum())
    diff_variance = float(((k_diff - diff_average) ** 2 * p_diff).sum())
    diff_entropy = _entropy(p_diff)

    # Information measures of correlation from marginal entropies.
    hx, hy = _entropy(px), _entropy(py)
    pxy = np.outer(px, py)
    mask = (P > 0) & (pxy > 0)
    hxy1 = float(-(P[mask] * np.log(pxy[mask])).sum())
    nz = pxy[pxy > 0]
    hxy2 = float(-(nz * np.log(nz)).sum())
    denom = max(hx, hy)
    imc1 = (entropy - hxy1) / denom if denom > 0 else 0.0
    imc2 = float(np.sqrt(max(0.0, 1.0 - np.exp(-2.0 * (hxy2 - entropy)))))

    # Max correlation coefficient via its eigenvalue bound: sqrt of the
    # second-largest eigenvalue of Q_ij = sum_k P_ik P_jk / (px_i py_k).
    if sd_x > 0 and sd_y > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            A = np.where(px[:, None] > 0, P / px[:, None], 0.0)
            B = np.where(py[None, :] > 0, P / py[None, :], 0.0)
        Q = A @ B.T
        eig = np.sort(np.real(np.linalg.eigvals(Q)))
        mcc = float(np.sqrt(max(0.0, eig[-2]))) if len(eig) >= 2 else 0.0
    else:
        mcc = 0.0

    return np.array([
        asm, contrast, correlation, sum_of_squares, idm, sum_average,
        sum_variance, sum_entropy, entropy, diff_variance, diff_entropy,
        imc1, imc2, mcc,
    ])


def glcm_features(p: Patch, levels: int = GLCM_LEVELS, offsets=GLCM_OFFSETS) -> np.ndarray:
    """14 Haralick features averaged over the axis-aligned unit offsets."""
    q = quantize_patch(p.voxels, levels)
    feats = [haralick_features(cooccurrence_matrix(q, levels, off)) for off in offsets]
    return np.mean(feats, axis=0)


# ---------------------------------------------------------------------------
# LBP
# ---------------------------------------------------------------------------

_LBP_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def lbp_histogram(p: Patch) -> np.ndarray:
    """8-bin LBP histogram pooled over axial slices.

    Codes are the count of neighbors >= center (0..8); the two rarest
    codes (0 and 1, the strict-local-max patterns) share a bin, a fixed
    layout so histograms are comparable across patches. Normalized to
    sum 1. A constant patch puts all mass in the all-ones bin.
    """
    v = p.voxels.astype(np.float64)
    counts = np.zeros(9, dtype=np.int64)
    center = v[:, 1:-1, 1:-1]
    ones = np.zeros(center.shape, dtype=np.int64)
    for dy, dx in _LBP_NEIGHBORS:
        neigh = v[:, 1 + dy:v.shape[1] - 1 + dy, 1 + dx:v.shape[2] - 1 + dx]
        ones += (neigh >= center)
    counts += np.bincount(ones.ravel(), minlength=9)
    hist = np.empty(8, dtype=np.float64)
    hist[0] = counts[0] + counts[1]
    hist[1:] = counts[2:]
    return hist / hist.sum()


# ---------------------------------------------------------------------------
# Gabor
# ---------------------------------------------------------------------------

def gabor_kernel(frequency: float, theta_deg: float, max_half: int | None = None):
    """Complex Gabor kernel, real part forced to zero mean.

    The support is 3 sigma but never wider than the image it will be
    applied to (max_half), so small slices keep usable selectivity.
    """
    sigma = 0.5 / frequency
    half = int(np.ceil(3.0 * sigma))
    if max_half is not None:
        half = min(half, max_half)
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    t = np.deg2rad(theta_deg)
    xr = x * np.cos(t) + y * np.sin(t)
    yr = -x * np.sin(t) + y * np.cos(t)
    env = np.exp(-(xr ** 2 + yr ** 2) / (2.0 * sigma ** 2))
    real = env * np.cos(2 * np.pi * frequency * xr)
    imag = env * np.sin(2 * np.pi * frequency * xr)
    real -= real.mean()   # imag is odd in xr, already zero mean
    imag -= imag.mean()
    return real, imag


_GABOR_BANKS: dict = {}


def _gabor_bank(side: int):
    if side not in _GABOR_BANKS:
        max_half = (side - 1) // 2
        _GABOR_BANKS[side] = [gabor_kernel(f, t, max_half=max_half)
                              for f in GABOR_FREQUENCIES for t in GABOR_ORIENTATIONS]
    return _GABOR_BANKS[side]


def gabor_features(p: Patch) -> np.ndarray:
    """Mean magnitude response of the 2-frequency x 4-orientation bank.

    Applied to the central axial slice; reflect padding keeps constant
    patches at exactly zero response (zero-mean kernels).
    """
    sl = p.voxels[p.voxels.shape[0] // 2].astype(np.float64)
    out = np.empty(8, dtype=np.float64)
    for k, (real, imag) in enumerate(_gabor_bank(sl.shape[0])):
        re = ndimage.correlate(sl, real, mode="reflect")
        im = ndimage.correlate(sl, imag, mode="reflect")
        out[k] = np.sqrt(re ** 2 + im ** 2).mean()
    return out


# ---------------------------------------------------------------------------
# First-order statistics
# ---------------------------------------------------------------------------

def firstorder_features(p: Patch) -> np.ndarray:
    """(mean, std, skewness, excess kurtosis) of raw HU; moments 0 when flat."""
    v = p.voxels.astype(np.float64).ravel()
    mean = v.mean()
    m2 = ((v - mean) ** 2).mean()
    std = np.sqrt(m2)
    if m2 == 0:
        return np.array([mean, 0.0, 0.0, 0.0])
    m3 = ((v - mean) ** 3).mean()
    m4 = ((v - mean) ** 4).mean()
    return np.array([mean, std, m3 / m2 ** 1.5, m4 / m2 ** 2 - 3.0])


# ---------------------------------------------------------------------------
# Assembled descriptor and corpus scaler
# ---------------------------------------------------------------------------

@dataclass
class RadiomicVector:
    """34 reals in the fixed family layout; raw (pre z-scoring) unless noted."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_FEATURES,):
            raise FeatureError(f"expected {N_FEATURES} features, got {self.values.shape}")


def radiomic_vector(p: Patch, scaler=None) -> RadiomicVector:
    """Concatenate [GLCM | LBP | Gabor | first-order]; z-score if a fitted scaler is given."""
    parts = {
        "glcm": glcm_features(p),
        "lbp": lbp_histogram(p),
        "gabor": gabor_features(p),
        "firstorder": firstorder_features(p),
    }
    for family, vals in parts.items():
        if not np.all(np.isfinite(vals)):
            raise FeatureError(f"non-finite {family} feature on patch at {p.origin_index}")
    vec = np.concatenate([parts["glcm"], parts["lbp"], parts["gabor"], parts["firstorder"]])
    if scaler is not None:
        vec = scaler.transform(vec)
    return RadiomicVector(vec)


class RadiomicScaler:
    """Per-feature z-scoring statistics, fitted once on the training corpus."""

    def __init__(self, mean=None, std=None):
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = None if std is None else np.asarray(std, dtype=np.float64)

    @property
    def fitted(self):
        return self.mean is not None

    def fit(self, vectors) -> "RadiomicScaler":
        M = np.stack([v.values if isinstance(v, RadiomicVector) else np.asarray(v)
                      for v in vectors])
        self.mean = M.mean(axis=0)
        self.std = M.std(axis=0)
        return self

    def transform(self, values: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise FeatureError("scaler not fitted")
        std = np.where(self.std > 1e-12, self.std, 1.0)
        return (np.asarray(values, dtype=np.float64) - self.mean) / std


def export_vectors_csv(path, patches, vectors):
    """One row per patch: origin coordinates followed by the 34 features."""
    header = ["z", "y", "x"] + [f"f{i:02d}" for i in range(N_FEATURES)]
    lines = [",".join(header)]
    for p, v in zip(patches, vectors):
        vals = v.values if isinstance(v, RadiomicVector) else np.asarray(v)
        lines.append(",".join([str(c) for c in p.origin_index]
                              + [repr(float(x)) for x in vals]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Teacher projection head (frozen)
# ---------------------------------------------------------------------------

@dataclass
class TeacherHeadParams:
    """Two-layer projection onto the 128-d unit hypersphere; never trained."""

    W1: np.ndarray  # (128, 34)
    W2: np.ndarray  # (128, 128)
    b1: np.ndarray  # (128,)
    b2: np.ndarray  # (128,)

    def __post_init__(self):
        expect = {"W1": (EMBED_DIM, N_FEATURES), "W2": (EMBED_DIM, EMBED_DIM),
                  "b1": (EMBED_DIM,), "b2": (EMBED_DIM,)}
        for name, shape in expect.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise FeatureError(f"{name} must have shape {shape}, got {arr.shape}")
            setattr(self, name, arr)


@dataclass
class Embedding:
    """A point on the 128-d unit hypersphere."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (EMBED_DIM,):
            raise FeatureError(f"embedding must have {EMBED_DIM} entries")
        n = np.linalg.norm(self.values)
        if abs(n - 1.0) > 1e-6:
            raise FeatureError(f"embedding norm {n} deviates from 1 by more than 1e-6")


def init_teacher_head(seed: int) -> TeacherHeadParams:
    """Seeded uniform init, U(-1/sqrt(fan_in), +1/sqrt(fan_in)), frozen for the run.

    Values are rounded through float32 so checkpoint round-trips are exact.
    """
    rng = np.random.default_rng(seed)
    def u(fan_in, shape):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape).astype(np.float32).astype(np.float64)
    return TeacherHeadParams(
        W1=u(N_FEATURES, (EMBED_DIM, N_FEATURES)),
        W2=u(EMBED_DIM, (EMBED_DIM, EMBED_DIM)),
        b1=u(N_FEATURES, (EMBED_DIM,)),
        b2=u(EMBED_DIM, (EMBED_DIM,)),
    )


def teacher_project(r: RadiomicVector, theta: TeacherHeadParams) -> Embedding:
    """l2(W2·relu(W1·r + b1) + b2). Expects z-scored input."""
    h = np.maximum(theta.W1 @ r.values + theta.b1, 0.0)
    z = theta.W2 @ h + theta.b2
    n = np.linalg.norm(z)
    if n < 1e-12:
        raise FeatureError("degenerate embedding: pre-normalization norm below 1e-12")
    return Embedding(z / n)
