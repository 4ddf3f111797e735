"""Training losses: reconstruction, round-trip duality, and the
kernel-weighted cross-modal contrastive consistency term.

Every loss is built from the closed diffcore catalog so gradients flow
through the same tape as the model. Kernel weights are computed from
ground-truth motion in plain numpy and enter the graph as constants; no
gradient flows through them or the bandwidth.
"""

from __future__ import annotations

import numpy as np

from dataclasses import dataclass, field

from . import diffcore as dc
from .data import MotionSequence
from .model import ForwardOutputs

_NORM_FLOOR = 1e-12


@dataclass
class LossWeights:
    primal: float = 1.0
    dual: float = 1e-8
    dr: float = 1e-9
    ccrl: float = 1e-6


@dataclass
class CCRLConfig:
    """sigma=None selects the per-sequence median pairwise motion distance
    (recomputed per sequence, excluded from gradient flow)."""

    sigma: float | None = None
    anchor_weighting: str = "uniform"  # or "kernel": heuristic anchor weights

    def validate(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("CCRLConfig.sigma must be positive when given")
        if self.anchor_weighting not in ("uniform", "kernel"):
            raise ValueError("anchor_weighting must be 'uniform' or 'kernel'")


@dataclass
class LossBundle:
    l_primal: float
    l_dual: float
    l_dr: float
    l_ccrl: float
    total: float


def mse(prediction: dc.Tensor, target: dc.Tensor) -> dc.Tensor:
    diff = dc.subtract(prediction, target)
    return dc.mean_all(dc.multiply(diff, diff))


def smooth_l1(a: dc.Tensor, b: dc.Tensor) -> dc.Tensor:
    """Mean Huber penalty with beta=1: 0.5*x^2 inside |x|<1, |x|-0.5 outside.

    Composed from relu: |x| = relu(x)+relu(-x), min(|x|,1) = |x|-relu(|x|-1).
    """
    diff = dc.subtract(a, b)
    absval = dc.add(dc.relu(diff), dc.relu(dc.scalar_multiply(diff, -1.0)))
    ones = dc.Tensor(np.ones_like(diff.data))
    clipped = dc.subtract(absval, dc.relu(dc.subtract(absval, ones)))
    quad = dc.scalar_multiply(dc.multiply(clipped, clipped), 0.5)
    return dc.mean_all(dc.add(quad, dc.subtract(absval, clipped)))


def duality_regularizer(x, x_round, y, y_round) -> dc.Tensor:
    """Round-trip agreement between encoder latents and fused predictions."""
    return dc.add(smooth_l1(x, x_round), smooth_l1(y, y_round))


def motion_kernel(gt_motion: MotionSequence, cfg: CCRLConfig) -> tuple[np.ndarray, float]:
    """(T, T) Gaussian weights from pairwise frame motion distances.

    Bandwidth is cfg.sigma, or the median pairwise distance of this sequence;
    when that median degenerates to ~0 (all frames identical) the fallback
    bandwidth 1.0 is used, which still yields all-ones weights.
    """
    cfg.validate()
    t = gt_motion.frames
    flat = gt_motion.displacements.reshape(t, -1)
    sq = ((flat[:, None, :] - flat[None, :, :]) ** 2).sum(axis=2)
    if cfg.sigma is not None:
        sigma = float(cfg.sigma)
    else:
        iu = np.triu_indices(t, k=1)
        sigma = float(np.median(np.sqrt(sq[iu]))) if iu[0].size else 1.0
        if sigma < _NORM_FLOOR:
            sigma = 1.0
    return np.exp(-sq / (2.0 * sigma * sigma)), sigma


def _row_normalize(m: dc.Tensor) -> dc.Tensor:
    """Rows scaled to unit norm, with the squared norm floored at 1e-24
    (equivalent to the 1e-12 norm floor, sqrt being monotone)."""
    t, d = m.data.shape
    ones_col = dc.Tensor(np.ones((d, 1)))
    sq_norm = dc.matmul(dc.multiply(m, m), ones_col)  # (T, 1)
    floor = dc.Tensor(np.full((t, 1), _NORM_FLOOR**2))
    floored = dc.add(floor, dc.relu(dc.subtract(sq_norm, floor)))
    inv_norm = dc.exp(dc.scalar_multiply(dc.log(floored), -0.5))
    ones_row = dc.Tensor(np.ones((1, d)))
    return dc.multiply(m, dc.matmul(inv_norm, ones_row))


def ccrl_direction(p: dc.Tensor, q: dc.Tensor, gt_motion: MotionSequence, cfg: CCRLConfig) -> dc.Tensor:
    """Contrastive consistency with anchor rows from p against q (inter) and
    p itself (intra); motion-kernel weights soften temporally close negatives.

    Per anchor k: loss_k = -s_inter[k,k] + log(sum_{t!=k} exp(s_inter[k,t]*(1-w[k,t]))
    + exp(s_intra[k,t]*(1-w[k,t]))), averaged uniformly over anchors (or with
    normalized kernel-mass anchor weights when configured).
    """
    t = p.data.shape[0]
    if q.data.shape[0] != t or gt_motion.frames != t:
        raise dc.ShapeMismatchError("ccrl_direction: feature rows and motion frames must align")
    if t < 2:
        raise ValueError("ccrl_direction needs at least 2 frames")
    weights, _ = motion_kernel(gt_motion, cfg)
    pn = _row_normalize(p)
    qn = _row_normalize(q)
    s_inter = dc.matmul(pn, dc.transpose_last_two(qn))
    s_intra = dc.matmul(pn, dc.transpose_last_two(pn))
    one_minus_w = dc.Tensor(1.0 - weights)
    off_diag = dc.Tensor(1.0 - np.eye(t))
    energy = dc.add(
        dc.exp(dc.multiply(s_inter, one_minus_w)),
        dc.exp(dc.multiply(s_intra, one_minus_w)),
    )
    ones_col = dc.Tensor(np.ones((t, 1)))
    denom = dc.matmul(dc.multiply(energy, off_diag), ones_col)  # (T, 1)
    diag = dc.matmul(dc.multiply(s_inter, dc.Tensor(np.eye(t))), ones_col)  # (T, 1)
    per_anchor = dc.subtract(dc.log(denom), diag)
    if cfg.anchor_weighting == "kernel":
        anchor_mass = weights.mean(axis=1)
        anchor_w = (anchor_mass / anchor_mass.sum()).reshape(t, 1)
        return dc.sum_all(dc.multiply(per_anchor, dc.Tensor(anchor_w)))
    return dc.mean_all(per_anchor)


def ccrl_total(x, y, x_round, y_round, gt_motion: MotionSequence, cfg: CCRLConfig) -> dc.Tensor:
    """Consistency on encoder latents plus consistency on fused predictions."""
    return dc.add(
        ccrl_direction(x, y, gt_motion, cfg),
        ccrl_direction(x_round, y_round, gt_motion, cfg),
    )


def combine_weighted(weights: LossWeights, terms: dict[str, dc.Tensor | None]) -> dc.Tensor:
    """lambda-weighted sum of the available scalar terms; zero-weight or
    absent terms contribute nothing (and are not required to exist)."""
    total = None
    for name, lam in (("primal", weights.primal), ("dual", weights.dual),
                      ("dr", weights.dr), ("ccrl", weights.ccrl)):
        term = terms.get(name)
        if term is None or lam == 0.0:
            continue
        piece = dc.scalar_multiply(term, lam)
        total = piece if total is None else dc.add(total, piece)
    if total is None:
        raise ValueError("no loss terms to combine")
    return total


def total_loss(
    primal: ForwardOutputs,
    dual: ForwardOutputs | None,
    gt_motion: MotionSequence,
    gt_features,
    weights: LossWeights,
    ccrl_cfg: CCRLConfig,
) -> tuple[LossBundle, dc.Tensor]:
    """Assemble the weighted objective; returns the bundle of component
    values and the scalar node to backpropagate from.

    With no dual outputs (dual-path ablation) the dual, round-trip, and
    consistency terms are dropped and reported as 0.
    """
    t = gt_motion.frames
    gt_flat = dc.Tensor(gt_motion.displacements.reshape(t, -1))
    terms: dict[str, dc.Tensor | None] = {"dual": None, "dr": None, "ccrl": None}
    terms["primal"] = mse(primal.prediction, gt_flat)
    if dual is not None:
        feat_values = gt_features.values if hasattr(gt_features, "values") else gt_features
        terms["dual"] = mse(dual.prediction, dc.Tensor(feat_values))
        if weights.dr != 0.0:
            terms["dr"] = duality_regularizer(
                primal.audio_latent, dual.fused, primal.motion_latent, primal.fused
            )
        if weights.ccrl != 0.0:
            terms["ccrl"] = ccrl_total(
                primal.audio_latent, primal.motion_latent, dual.fused, primal.fused, gt_motion, ccrl_cfg
            )
    total = combine_weighted(weights, terms)
    bundle = LossBundle(
        l_primal=terms["primal"].item(),
        l_dual=terms["dual"].item() if terms["dual"] is not None else 0.0,
        l_dr=terms["dr"].item() if terms["dr"] is not None else 0.0,
        l_ccrl=terms["ccrl"].item() if terms["ccrl"] is not None else 0.0,
        total=total.item(),
    )
    return bundle, total
