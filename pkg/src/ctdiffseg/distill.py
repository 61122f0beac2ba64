"""Teacher-student contrastive distillation and the training loop.

The teacher side is a frozen function of radiomic descriptors; positives
are batch pairs whose teacher embeddings exceed a cosine threshold. The
contrastive term enters the total objective through a linear warmup so
the bottleneck is not shaped before denoising features exist.
"""

import copy
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .ctdata import normalize_values
from .diffusion import NoiseSchedule, diffusion_loss, make_schedule, q_sample
from .radiomics import (
    RadiomicScaler,
    init_teacher_head,
    radiomic_vector,
    teacher_project,
)
from .unet import build_denoiser, build_student_head


class DistillError(ValueError):
    pass


@dataclass
class DistillConfig:
    """Contrastive objective constants; defaults follow the published setup."""

    tau: float = 0.5
    kappa: float = 0.07
    t_warmup: int = 5000
    t_ramp: int = 5000
    lambda_max: float = 0.5
    enabled: bool = True
    warmup_enabled: bool = True   # False = lambda_max from step 0

    def __post_init__(self):
        if self.kappa <= 0:
            raise DistillError(f"kappa must be positive, got {self.kappa}")
        if self.t_ramp < 1:
            raise DistillError(f"t_ramp must be >= 1, got {self.t_ramp}")
        if self.lambda_max < 0:
            raise DistillError(f"lambda_max must be >= 0, got {self.lambda_max}")
        if not -1.0 < self.tau < 1.0:
            raise DistillError(f"tau must lie in (-1, 1), got {self.tau}")


@dataclass
class SimilarityMatrix:
    """Teacher cosine similarities; symmetric with unit diagonal."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        B = self.values.shape[0]
        if self.values.shape != (B, B):
            raise DistillError("similarity matrix must be square")


def radiomic_similarity(embeddings) -> SimilarityMatrix:
    """Pairwise cosine similarity of unit-norm teacher embeddings."""
    Z = np.stack([e.values if hasattr(e, "values") else np.asarray(e, dtype=np.float64)
                  for e in embeddings])
    norms = np.linalg.norm(Z, axis=1)
    bad = np.abs(norms - 1.0) > 1e-4
    if bad.any():
        raise DistillError(
            f"non-unit teacher embedding(s) at rows {np.flatnonzero(bad).tolist()}"
        )
    S = Z @ Z.T
    np.fill_diagonal(S, 1.0)
    return SimilarityMatrix(S)


class InfoNceResult(NamedTuple):
    loss: torch.Tensor
    active_anchors: int     # anchors with at least one positive
    flagged: bool           # True when no anchor had a positive


def info_nce(z_diff, similarity: SimilarityMatrix, cfg: DistillConfig) -> InfoNceResult:
    """Indicator-positive InfoNCE over student embeddings.

    Per anchor i: -log of the positive-pair exp-similarity mass over the
    all-pairs mass (temperature kappa). Anchors with no positive pair are
    excluded from the average; a batch with no positives anywhere yields
    loss 0 with the flag set. Gradient flows only through z_diff.
    """
    if isinstance(z_diff, np.ndarray):
        z = torch.from_numpy(z_diff.astype(np.float64))
    else:
        z = z_diff
    B = z.shape[0]
    if B < 2:
        raise DistillError(f"need a batch of at least 2 embeddings, got {B}")
    S = similarity.values
    if S.shape != (B, B):
        raise DistillError(f"similarity shape {S.shape} does not match batch {B}")
    with torch.no_grad():
        norm_dev = (z.norm(dim=1) - 1.0).abs().max().item()
    if norm_dev > 1e-4:
        raise DistillError(f"non-unit student embedding (deviation {norm_dev:.2e})")

    logits = (z @ z.T) / cfg.kappa
    offdiag = ~torch.eye(B, dtype=torch.bool)
    pos = torch.from_numpy(S > cfg.tau) & offdiag

    neg_inf = torch.tensor(float("-inf"), dtype=logits.dtype)
    denom = torch.logsumexp(torch.where(offdiag, logits, neg_inf), dim=1)
    numer = torch.logsumexp(torch.where(pos, logits, neg_inf), dim=1)
    active = pos.any(dim=1)
    n_active = int(active.sum())
    if n_active == 0:
        return InfoNceResult(torch.zeros((), dtype=logits.dtype), 0, True)
    loss = (denom[active] - numer[active]).mean()
    return InfoNceResult(loss, n_active, False)


def warmup_lambda(step: int, cfg: DistillConfig) -> float:
    """Linear ramp from 0 at t_warmup to lambda_max at t_warmup + t_ramp."""
    if step < 0:
        raise DistillError(f"step must be >= 0, got {step}")
    if not cfg.warmup_enabled:
        return cfg.lambda_max
    frac = (step - cfg.t_warmup) / cfg.t_ramp
    return cfg.lambda_max * min(max(frac, 0.0), 1.0)


def total_loss(l_diff, l_nce, step: int, cfg: DistillConfig):
    """Denoising loss plus the warmed-up contrastive term."""
    for name, v in (("l_diff", l_diff), ("l_nce", l_nce)):
        val = float(v.detach() if isinstance(v, torch.Tensor) else v)
        if not np.isfinite(val):
            raise DistillError(f"non-finite {name}: {val}")
    return l_diff + warmup_lambda(step, cfg) * l_nce


def positive_pair_fraction(S: np.ndarray, tau: float) -> float:
    """Fraction of off-diagonal pairs that count as positives."""
    B = S.shape[0]
    off = ~np.eye(B, dtype=bool)
    return float((S[off] > tau).mean())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    """Loop hyperparameters (the contrastive constants live in DistillConfig)."""

    steps: int = 400
    batch_size: int = 8
    lr: float = 1e-4
    widths: tuple = (32, 64, 128)
    glcm_levels: int = 32


@dataclass
class TrainedModel:
    """In-memory training artifact; serialize via the checkpoint module."""

    model: torch.nn.Module
    student: torch.nn.Module
    teacher: object
    scaler: RadiomicScaler
    schedule: NoiseSchedule
    schedule_params: tuple            # (T, beta_start, beta_end)
    window: tuple
    widths: tuple
    patch_side: int
    metrics: list = field(default_factory=list)
    aborted: bool = False


def teacher_embeddings(patches, teacher, scaler) -> np.ndarray:
    """Frozen teacher pass over raw patches: radiomics -> z-score -> project."""
    out = np.zeros((len(patches), 128))
    for i, p in enumerate(patches):
        vec = radiomic_vector(p, scaler=scaler)
        out[i] = teacher_project(vec, teacher).values
    return out


def train(patches, distill_cfg: DistillConfig, settings: TrainSettings,
          seed: int, window=(-1024, 600), schedule_params=(1000, 1e-4, 0.02),
          log_every: int = 1, progress=None) -> TrainedModel:
    """Joint denoising + distillation training over a fixed patch corpus.

    Deterministic given `seed`: model init, batch order, timesteps, and
    noise are all derived from it. The teacher head and the radiomic
    scaler are fitted once up front and never updated; a non-finite loss
    aborts the loop and returns the last good parameter state.
    """
    if len(patches) == 0:
        raise DistillError("empty training corpus")
    side = patches[0].side

    T, beta_start, beta_end = schedule_params
    schedule = make_schedule(T, beta_start, beta_end)
    model = build_denoiser(widths=settings.widths, seed=seed)
    student = build_student_head(seed=seed + 1)
    teacher = init_teacher_head(seed + 2)

    scaler = RadiomicScaler().fit([radiomic_vector(p) for p in patches])
    if distill_cfg.enabled:
        z_teacher = teacher_embeddings(patches, teacher, scaler)
    else:
        z_teacher = None

    x0_all = torch.from_numpy(np.stack([
        normalize_values(p.voxels, window) for p in patches
    ])).float()[:, None]  # (N, 1, S, S, S)

    params = list(model.parameters()) + list(student.parameters())
    opt = torch.optim.Adam(params, lr=settings.lr)
    rng = np.random.default_rng(seed)
    metrics = []
    last_good = None

    for step in range(settings.steps):
        idx = rng.integers(0, len(patches), size=settings.batch_size)
        t = rng.integers(0, T, size=settings.batch_size)
        eps = torch.from_numpy(
            rng.standard_normal((settings.batch_size, 1, side, side, side))
        ).float()
        x0 = x0_all[idx]
        x_t = q_sample(x0, t, eps, schedule)

        eps_pred, f = model(x_t, torch.from_numpy(t))
        l_diff = diffusion_loss(eps_pred, eps)

        lam = warmup_lambda(step, distill_cfg) if distill_cfg.enabled else 0.0
        pos_frac = 0.0
        l_nce = torch.zeros((), dtype=l_diff.dtype)
        if distill_cfg.enabled:
            S = radiomic_similarity(z_teacher[idx])
            z_diff = student(f)
            res = info_nce(z_diff, S, distill_cfg)
            l_nce = res.loss
            pos_frac = positive_pair_fraction(S.values, distill_cfg.tau)

        if not (torch.isfinite(l_diff) and torch.isfinite(l_nce)):
            result = TrainedModel(model, student, teacher, scaler, schedule,
                                  schedule_params, window, tuple(settings.widths),
                                  side, metrics, aborted=True)
            if last_good is not None:
                model.load_state_dict(last_good[0])
                student.load_state_dict(last_good[1])
            return result

        loss = l_diff + lam * l_nce
        opt.zero_grad()
        loss.backward()
        last_good = (copy.deepcopy(model.state_dict()),
                     copy.deepcopy(student.state_dict()))
        opt.step()

        if step % log_every == 0 or step == settings.steps - 1:
            metrics.append({
                "step": step,
                "l_diff": float(l_diff.detach()),
                "l_nce": float(l_nce.detach()),
                "lambda": lam,
                "pos_frac": pos_frac,
            })
        if progress is not None:
            progress(step, metrics[-1] if metrics else None)

    return TrainedModel(model, student, teacher, scaler, schedule,
                        schedule_params, window, tuple(settings.widths),
                        side, metrics)
