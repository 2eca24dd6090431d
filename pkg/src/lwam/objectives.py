"""Training losses: flow matching, prior-posterior alignment, anti-collapse
regularizers, and their weighted combination.

Squared norms are implemented as element means so loss scales are independent
of chunk length and hidden width. Both branches of one example share the same
flow time, noise, and interpolated action, which keeps the two action
pathways comparable like for like under alignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import DiffTensor


@dataclass(frozen=True)
class FlowSample:
    """One draw of the linear probability path: a_t = t*a + (1-t)*eps, u_t = a - eps."""

    t: np.ndarray       # scalar or [B]
    eps: np.ndarray     # [.., T, A]
    a_t: np.ndarray
    u_t: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    """Weights and knobs for the auxiliary terms of the training objective.

    ``tau`` is the norm-hinge threshold, ``n_proj`` the random-subspace width
    for the spectral term. The spectrum is taken over all latent rows pooled
    across the batch within one (layer, branch).
    """

    w_align: float = 1e-3
    w_norm: float = 1e-4
    w_rank: float = 1e-4
    tau: float = 8.0
    n_proj: int = 64
    align_stop_posterior: bool = False

    def __post_init__(self):
        if min(self.w_align, self.w_norm, self.w_rank) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.n_proj < 1:
            raise ValueError("n_proj must be >= 1")


def make_flow_sample(a, t, eps):
    a = np.asarray(a)
    eps = np.asarray(eps)
    t_arr = np.asarray(t, dtype=a.dtype)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError(f"flow time must lie in [0, 1], got {t}")
    if a.shape != eps.shape:
        raise nm.ShapeError(f"action/noise shapes disagree: {a.shape} vs {eps.shape}")
    tb = t_arr.reshape(t_arr.shape + (1,) * (a.ndim - t_arr.ndim))
    return FlowSample(t=t_arr, eps=eps, a_t=tb * a + (1.0 - tb) * eps, u_t=a - eps)


def fm_loss(v_pred, u_t):
    """Mean squared error between the predicted and target velocity fields."""
    if not isinstance(u_t, DiffTensor):
        u_t = nm.tensor(u_t, dtype=v_pred.dtype)
    if v_pred.shape != u_t.shape:
        raise nm.ShapeError(f"velocity shapes disagree: {v_pred.shape} vs {u_t.shape}")
    diff = nm.sub(v_pred, u_t)
    return nm.mean(nm.mul(diff, diff))


def align_loss(taps, stop_posterior=False):
    """Layer-averaged, element-normalized squared distance between branch taps."""
    if len(taps.prior) != len(taps.post) or not taps.prior:
        raise nm.ShapeError(
            f"alignment needs matched non-empty taps, got {len(taps.prior)} prior / {len(taps.post)} post")
    terms = []
    for hp, hq in zip(taps.prior, taps.post):
        if hp.shape != hq.shape:
            raise nm.ShapeError(f"tap shapes disagree: {hp.shape} vs {hq.shape}")
        if stop_posterior:
            hq = hq.detach()
        diff = nm.sub(hp, hq)
        terms.append(nm.mean(nm.mul(diff, diff)))
    total = terms[0]
    for term in terms[1:]:
        total = nm.add(total, term)
    return nm.mul(total, 1.0 / len(terms))


def norm_reg(latent_states, tau):
    """Quadratic hinge [max(0, tau - ||h||)]^2 averaged over all latent rows.

    ``latent_states`` is a list of [.., K, d] tensors (any leading batch
    dims); every row of every entry counts once.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    hinges = []
    for h in latent_states:
        rows = nm.reshape(h, (-1, h.shape[-1]))
        gap = nm.relu(nm.sub(float(tau), nm.l2_norm(rows, axis=-1)))
        hinges.append(nm.mul(gap, gap))
    flat = nm.concatenate(hinges, axis=0) if len(hinges) > 1 else hinges[0]
    return nm.mean(flat)


def make_projection(d, n, rng, dtype=np.float64):
    """Gaussian projection with variance 1/n, drawn fresh from the run stream."""
    return rng.normal(0.0, 1.0 / np.sqrt(n), (d, n)).astype(dtype)


def rank_reg(states, proj):
    """Negative spectral entropy of the projected, row-normalized Gram spectrum.

    0 under rank-1 collapse, -ln(M) for a flat spectrum; returns exactly 0
    when the spectrum vanishes entirely.
    """
    if not isinstance(proj, DiffTensor):
        proj = nm.tensor(proj, dtype=states.dtype)
    m = states.shape[0]
    if m < 1 or proj.shape[1] < 1:
        raise ValueError("need at least one state row and one projection dim")
    h = nm.matmul(states, proj)
    norms = nm.l2_norm(h, axis=-1, keepdims=True)
    # max(norm, tiny) keeps zero rows at exactly zero after division
    tiny = 1e-30
    h_hat = nm.div(h, nm.add(nm.relu(nm.sub(norms, tiny)), tiny))
    gram = nm.matmul(h_hat, nm.transpose(h_hat, (1, 0)))
    evals, _ = nm.eigh_sym(gram)
    lam = nm.relu(evals)  # clamp eigensolver noise below zero
    total = nm.sum_(lam)
    if total.values <= 0.0:
        return nm.mul(total, 0.0)
    p = nm.div(lam, nm.reshape(total, (1,)))
    return nm.sum_(nm.xlogx(p))


def rank_reg_mean(tap_lists, proj):
    """Mean of rank_reg across every (layer, branch) collection of latent rows."""
    terms = []
    for taps in tap_lists:
        for h in taps:
            rows = nm.reshape(h, (-1, h.shape[-1]))
            terms.append(rank_reg(rows, proj))
    if not terms:
        raise ValueError("no latent states to regularize")
    total = terms[0]
    for term in terms[1:]:
        total = nm.add(total, term)
    return nm.mul(total, 1.0 / len(terms))


def total_loss(fm_prior, fm_post, align, norm, rank, weights, include_reg=True):
    """Combined objective; post-training mode drops the regularizer term entirely."""
    loss = fm_prior
    if fm_post is not None:
        loss = nm.add(loss, fm_post)
    if align is not None:
        loss = nm.add(loss, nm.mul(align, weights.w_align))
    if include_reg:
        if norm is not None:
            loss = nm.add(loss, nm.mul(norm, weights.w_norm))
        if rank is not None:
            loss = nm.add(loss, nm.mul(rank, weights.w_rank))
    return loss
