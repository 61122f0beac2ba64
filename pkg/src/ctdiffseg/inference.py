"""Frozen-model feature extraction and fast deterministic sampling.

Patch descriptors average student embeddings and pooled bottleneck maps
over a set of noise timesteps: [mean z_t (128) || mean pooled f_t (256)],
384 entries. Default extraction noises the real patch to each t and runs
one forward pass, so the input conditions the features; a trajectory mode
records the same quantities while a solver walks down from the largest
recorded timestep. Generation uses a second-order multistep solver on the
noise-prediction model.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import Checkpoint
from .ctdata import CtVolume, Patch, denormalize_hu, NormalizedVolume, normalize_values

DEFAULT_TIMESTEPS = (50, 100, 150, 200)


class InferenceError(ValueError):
    pass


@dataclass
class PatchDescriptor:
    """384 reals: [mean z_t (128) || mean pooled f_t (256)] plus grid origin."""

    values: np.ndarray
    origin_index: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (384,):
            raise InferenceError(f"descriptor must have 384 entries, got {self.values.shape}")


def _check_timesteps(timesteps, T):
    ts = sorted(int(t) for t in timesteps)
    if not ts:
        raise InferenceError("timestep set is empty")
    if ts[0] < 0 or ts[-1] >= T:
        raise InferenceError(f"timesteps {ts} outside [0, {T})")
    return ts


def _patch_noise(noise_seed, origin, t, shape):
    """Noise keyed by (seed, origin, t): order of evaluation cannot matter."""
    rng = np.random.default_rng([int(noise_seed), *[int(o) for o in origin], int(t)])
    return rng.standard_normal(shape)


def _descriptor_terms_forward(x0_norm, origins, ckpt, ts, noise_seed, batch_size=64):
    """Per-timestep z_t and pooled f_t for a stack of normalized patches."""
    schedule = ckpt.schedule
    N = x0_norm.shape[0]
    z_sum = np.zeros((N, 128))
    f_sum = np.zeros((N, 256))
    with torch.no_grad():
        for t in ts:
            a, s = schedule.signal_noise(t)
            for lo in range(0, N, batch_size):
                hi = min(lo + batch_size, N)
                eps = np.stack([
                    _patch_noise(noise_seed, origins[i], t, x0_norm.shape[1:])
                    for i in range(lo, hi)
                ])
                x_t = torch.from_numpy(a * x0_norm[lo:hi] + s * eps).float()[:, None]
                tt = torch.full((hi - lo,), t, dtype=torch.long)
                _, f = ckpt.model(x_t, tt)
                z = ckpt.student(f)
                z_sum[lo:hi] += z.numpy()
                f_sum[lo:hi] += f.mean(dim=(2, 3, 4)).numpy()
    return z_sum / len(ts), f_sum / len(ts)


def _descriptor_terms_trajectory(x0_norm, origins, ckpt, ts, noise_seed):
    """Record z_t / pooled f_t while a first-order solver walks t_max -> 0."""
    schedule = ckpt.schedule
    N = x0_norm.shape[0]
    z_sum = np.zeros((N, 128))
    f_sum = np.zeros((N, 256))
    t_start = ts[-1]
    grid = list(range(t_start, -1, -1))
    ab = schedule.alpha_bars
    alph = np.sqrt(ab)
    sig = np.sqrt(1.0 - ab)
    lam = 0.5 * np.log(ab / (1.0 - ab))
    record = set(ts)
    with torch.no_grad():
        for i in range(N):
            eps0 = _patch_noise(noise_seed, origins[i], t_start, x0_norm.shape[1:])
            x = torch.from_numpy(
                alph[t_start] * x0_norm[i] + sig[t_start] * eps0
            ).float()[None, None]
            for j, s in enumerate(grid):
                eps_pred, f = ckpt.model(x, torch.tensor([s]))
                if s in record:
                    z_sum[i] += ckpt.student(f).numpy()[0]
                    f_sum[i] += f.mean(dim=(2, 3, 4)).numpy()[0]
                if j + 1 == len(grid):
                    break
                t = grid[j + 1]
                phi1 = np.expm1(lam[t] - lam[s])
                x = (alph[t] / alph[s]) * x - (sig[t] * phi1) * eps_pred
    return z_sum / len(ts), f_sum / len(ts)


def extract_features(x0: Patch, ckpt: Checkpoint, timesteps=DEFAULT_TIMESTEPS,
                     noise_seed: int = 0, mode: str = "forward") -> PatchDescriptor:
    """Descriptor of one patch; deterministic given noise_seed."""
    ts = _check_timesteps(timesteps, ckpt.schedule_params[0])
    x0n = normalize_values(x0.voxels, ckpt.window)[None]
    origins = [x0.origin_index]
    if mode == "forward":
        z, f = _descriptor_terms_forward(x0n, origins, ckpt, ts, noise_seed)
    elif mode == "trajectory":
        z, f = _descriptor_terms_trajectory(x0n, origins, ckpt, ts, noise_seed)
    else:
        raise InferenceError(f"unknown extraction mode {mode!r}")
    return PatchDescriptor(np.concatenate([z[0], f[0]]), x0.origin_index)


def extract_corpus(volume: CtVolume, ckpt: Checkpoint, grid_stride: int,
                   noise_seed: int = 0, timesteps=DEFAULT_TIMESTEPS,
                   mode: str = "forward", batch_size: int = 64) -> list:
    """Descriptors for every grid-aligned patch fully inside the volume."""
    if grid_stride < 1:
        raise InferenceError(f"stride must be >= 1, got {grid_stride}")
    S = ckpt.patch_side
    Z, Y, X = volume.voxels.shape
    if min(Z, Y, X) < S:
        raise InferenceError(f"volume {volume.voxels.shape} smaller than patch side {S}")
    ts = _check_timesteps(timesteps, ckpt.schedule_params[0])

    norm = normalize_values(volume.voxels, ckpt.window)
    origins = [(z, y, x)
               for z in range(0, Z - S + 1, grid_stride)
               for y in range(0, Y - S + 1, grid_stride)
               for x in range(0, X - S + 1, grid_stride)]
    x0n = np.stack([norm[z:z + S, y:y + S, x:x + S] for z, y, x in origins])

    if mode == "forward":
        z_mean, f_mean = _descriptor_terms_forward(
            x0n, origins, ckpt, ts, noise_seed, batch_size=batch_size)
    elif mode == "trajectory":
        z_mean, f_mean = _descriptor_terms_trajectory(x0n, origins, ckpt, ts, noise_seed)
    else:
        raise InferenceError(f"unknown extraction mode {mode!r}")

    return [PatchDescriptor(np.concatenate([z_mean[i], f_mean[i]]), origins[i])
            for i in range(len(origins))]


def save_descriptors(path, descriptors):
    """Binary N x 384 float32 matrix next to a JSON origin index."""
    import json
    from pathlib import Path
    path = Path(path)
    mat = np.stack([d.values for d in descriptors]).astype("<f4")
    path.write_bytes(mat.tobytes())
    path.with_suffix(".json").write_text(json.dumps({
        "count": len(descriptors),
        "dim": 384,
        "origins": [list(d.origin_index) for d in descriptors],
    }, sort_keys=True))


def load_descriptors(path):
    import json
    from pathlib import Path
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    mat = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["count"], meta["dim"])
    return [PatchDescriptor(mat[i].astype(np.float64), tuple(meta["origins"][i]))
            for i in range(meta["count"])]


# ---------------------------------------------------------------------------
# DPM-Solver sampling
# ---------------------------------------------------------------------------

def _time_grid(T: int, steps: int):
    if steps >= T:
        return list(range(T - 1, -1, -1))
    raw = np.rint(np.linspace(T - 1, 0, steps + 1)).astype(int)
    grid = [int(raw[0])]
    for v in raw[1:]:
        if int(v) < grid[-1]:
            grid.append(int(v))
    if grid[-1] != 0:
        grid.append(0)
    return grid


def dpm_sample(model_fn, schedule, shape, seed: int = 0, steps: int = 250,
               order: int = 2, x_init=None) -> np.ndarray:
    """Multistep DPM solve of the noise-prediction ODE from pure noise.

    model_fn(x, t) -> predicted noise for a (1, 1, *shape) float tensor at
    integer timestep t. Returns the final data-space array (before any
    clamping). First-order mode is exactly the deterministic DDIM
    recursion; second order adds the standard multistep correction. The
    last step divides out the residual noise at t=0.
    """
    T = schedule.T
    if not 1 <= steps <= T:
        raise InferenceError(f"steps must lie in [1, {T}], got {steps}")
    if order not in (1, 2):
        raise InferenceError(f"order must be 1 or 2, got {order}")

    ab = schedule.alpha_bars
    alph = np.sqrt(ab)
    sig = np.sqrt(1.0 - ab)
    lam = 0.5 * np.log(ab / (1.0 - ab))
    grid = _time_grid(T, steps)

    if x_init is None:
        rng = np.random.default_rng(seed)
        x = torch.from_numpy(rng.standard_normal((1, 1) + tuple(shape))).float()
    else:
        x = torch.as_tensor(x_init).float()

    eps_prev = None
    lam_prev = None
    with torch.no_grad():
        for i in range(len(grid) - 1):
            s, t = grid[i], grid[i + 1]
            eps_s = model_fn(x, s)
            h = lam[t] - lam[s]
            phi1 = float(np.expm1(h))
            x_lin = (alph[t] / alph[s]) * x - (sig[t] * phi1) * eps_s
            if order == 2 and eps_prev is not None:
                r = (lam[s] - lam_prev) / h
                x = x_lin - 0.5 * (sig[t] * phi1) * (eps_s - eps_prev) / r
            else:
                x = x_lin
            eps_prev, lam_prev = eps_s, lam[s]
        # Divide out the residual noise at the final grid time.
        t0 = grid[-1]
        eps0 = model_fn(x, t0)
        x = (x - sig[t0] * eps0) / alph[t0]
    return x.numpy()[0, 0]


def dpm_generate(ckpt: Checkpoint, shape, steps: int = 250, seed: int = 0,
                 order: int = 2, spacing=(0.6, 0.6, 0.6)) -> CtVolume:
    """Sample a new HU volume from the trained model; deterministic given seed."""
    for d in shape:
        if d % 8 != 0:
            raise InferenceError(f"generation shape {shape} must be divisible by 8")

    def model_fn(x, t):
        eps, _ = ckpt.model(x, torch.tensor([t]))
        return eps

    x0 = dpm_sample(model_fn, ckpt.schedule, shape, seed=seed, steps=steps, order=order)
    x0 = np.clip(x0, -1.0, 1.0)
    nv = NormalizedVolume(voxels=x0.astype(np.float32), window=ckpt.window,
                          spacing=spacing)
    return denormalize_hu(nv)
