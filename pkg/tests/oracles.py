"""Independent brute-force oracles used by the test suite.

Everything here is deliberately written as explicit loops and straight-line
arithmetic, separate from the library's vectorized code paths.
"""

import numpy as np


# -- GLCM -------------------------------------------------------------------

def glcm_matrix_bruteforce(q, levels, offset):
    """Co-occurrence by explicit pair enumeration; symmetrized, normalized."""
    dz, dy, dx = offset
    Z, Y, X = q.shape
    P = np.zeros((levels, levels), dtype=np.float64)
    for z in range(Z):
        for y in range(Y):
            for x in range(X):
                z2, y2, x2 = z + dz, y + dy, x + dx
                if 0 <= z2 < Z and 0 <= y2 < Y and 0 <= x2 < X:
                    P[q[z, y, x], q[z2, y2, x2]] += 1.0
                    P[q[z2, y2, x2], q[z, y, x]] += 1.0
    return P / P.sum()


def haralick_bruteforce(P):
    """The 14 descriptors from explicit double loops over the matrix."""
    L = P.shape[0]
    px = [sum(P[i][j] for j in range(L)) for i in range(L)]
    py = [sum(P[i][j] for i in range(L)) for j in range(L)]
    mu_x = sum(i * px[i] for i in range(L))
    mu_y = sum(j * py[j] for j in range(L))
    var_x = sum((i - mu_x) ** 2 * px[i] for i in range(L))
    var_y = sum((j - mu_y) ** 2 * py[j] for j in range(L))
    sd_x, sd_y = np.sqrt(var_x), np.sqrt(var_y)

    p_sum = [0.0] * (2 * L - 1)
    p_diff = [0.0] * L
    for i in range(L):
        for j in range(L):
            p_sum[i + j] += P[i][j]
            p_diff[abs(i - j)] += P[i][j]

    def ent(vals):
        return -sum(v * np.log(v) for v in vals if v > 0)

    asm = sum(P[i][j] ** 2 for i in range(L) for j in range(L))
    contrast = sum(k ** 2 * p_diff[k] for k in range(L))
    if sd_x > 0 and sd_y > 0:
        correlation = sum((i - mu_x) * (j - mu_y) * P[i][j]
                          for i in range(L) for j in range(L)) / (sd_x * sd_y)
    else:
        correlation = 0.0
    idm = sum(P[i][j] / (1 + (i - j) ** 2) for i in range(L) for j in range(L))
    sum_average = sum(k * p_sum[k] for k in range(2 * L - 1))
    sum_variance = sum((k - sum_average) ** 2 * p_sum[k] for k in range(2 * L - 1))
    sum_entropy = ent(p_sum)
    entropy = ent([P[i][j] for i in range(L) for j in range(L)])
    diff_average = sum(k * p_diff[k] for k in range(L))
    diff_variance = sum((k - diff_average) ** 2 * p_diff[k] for k in range(L))
    diff_entropy = ent(p_diff)

    hx, hy = ent(px), ent(py)
    hxy1 = -sum(P[i][j] * np.log(px[i] * py[j])
                for i in range(L) for j in range(L)
                if P[i][j] > 0 and px[i] * py[j] > 0)
    hxy2 = -sum(px[i] * py[j] * np.log(px[i] * py[j])
                for i in range(L) for j in range(L) if px[i] * py[j] > 0)
    denom = max(hx, hy)
    imc1 = (entropy - hxy1) / denom if denom > 0 else 0.0
    imc2 = np.sqrt(max(0.0, 1.0 - np.exp(-2.0 * (hxy2 - entropy))))

    if sd_x > 0 and sd_y > 0:
        Q = np.zeros((L, L))
        for i in range(L):
            for j in range(L):
                s = 0.0
                for k in range(L):
                    if px[i] > 0 and py[k] > 0:
                        s += P[i][k] * P[j][k] / (px[i] * py[k])
                Q[i, j] = s
        eig = np.sort(np.real(np.linalg.eigvals(Q)))
        mcc = np.sqrt(max(0.0, eig[-2])) if L >= 2 else 0.0
    else:
        mcc = 0.0

    return np.array([asm, contrast, correlation, var_x, idm, sum_average,
                     sum_variance, sum_entropy, entropy, diff_variance,
                     diff_entropy, imc1, imc2, mcc])


# -- LBP --------------------------------------------------------------------

def lbp_hist_bruteforce(voxels):
    """Per-axial-slice LBP via explicit neighbor comparison at every interior pixel."""
    Z, Y, X = voxels.shape
    counts = [0] * 9
    for z in range(Z):
        for y in range(1, Y - 1):
            for x in range(1, X - 1):
                c = voxels[z, y, x]
                ones = 0
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        if dy == 0 and dx == 0:
                            continue
                        if voxels[z, y + dy, x + dx] >= c:
                            ones += 1
                counts[ones] += 1
    hist = [counts[0] + counts[1]] + counts[2:]
    total = sum(hist)
    return np.array([h / total for h in hist])


# -- EM for Gaussian mixtures ------------------------------------------------

def em_bruteforce(X, K, means0, covs0, weights0, n_iter=200):
    """Textbook EM with full covariances, written with explicit densities.

    Returns (means, covs, weights, responsibilities, loglik_trace).
    """
    X = np.asarray(X, dtype=np.float64)
    N, D = X.shape
    means = [np.array(m, dtype=np.float64) for m in means0]
    covs = [np.array(c, dtype=np.float64) for c in covs0]
    weights = list(np.asarray(weights0, dtype=np.float64))
    trace = []
    R = np.zeros((N, K))
    for _ in range(n_iter):
        dens = np.zeros((N, K))
        for k in range(K):
            inv = np.linalg.inv(covs[k])
            det = np.linalg.det(covs[k])
            norm = 1.0 / np.sqrt((2 * np.pi) ** D * det)
            for n in range(N):
                d = X[n] - means[k]
                dens[n, k] = weights[k] * norm * np.exp(-0.5 * d @ inv @ d)
        tot = dens.sum(axis=1)
        trace.append(float(np.log(tot).sum()))
        R = dens / tot[:, None]
        for k in range(K):
            nk = R[:, k].sum()
            weights[k] = nk / N
            means[k] = (R[:, k][:, None] * X).sum(axis=0) / nk
            diff = X - means[k]
            covs[k] = (R[:, k][:, None] * diff).T @ diff / nk + 1e-6 * np.eye(D)
    return means, covs, weights, R, trace


# -- Surface distances -------------------------------------------------------

def surface_voxels_bruteforce(mask):
    """Mask voxels with a 6-neighbor background (out-of-volume counts as background)."""
    Z, Y, X = mask.shape
    out = []
    for z in range(Z):
        for y in range(Y):
            for x in range(X):
                if not mask[z, y, x]:
                    continue
                for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    z2, y2, x2 = z + dz, y + dy, x + dx
                    if not (0 <= z2 < Z and 0 <= y2 < Y and 0 <= x2 < X) \
                            or not mask[z2, y2, x2]:
                        out.append((z, y, x))
                        break
    return out


def hd95_bruteforce(pred, gt, spacing):
    """All-pairs symmetric surface distances, 95th percentile in mm."""
    sp = np.asarray(spacing, dtype=np.float64)
    ps = surface_voxels_bruteforce(pred)
    gs = surface_voxels_bruteforce(gt)
    dists = []
    for a_set, b_set in ((ps, gs), (gs, ps)):
        for a in a_set:
            best = np.inf
            for b in b_set:
                d = np.sqrt((((np.array(a) - np.array(b)) * sp) ** 2).sum())
                best = min(best, d)
            dists.append(best)
    return float(np.percentile(dists, 95))
