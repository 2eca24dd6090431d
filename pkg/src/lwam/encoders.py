"""Frame encoders: trainable context tokens and frozen-path future embeddings.

The context encoder patchifies each frame, projects patches to the hidden
width and adds learned patch-position and frame-index embeddings; it is fully
trainable. The future encoder runs a patch projector whose parameters are
frozen at initialization (the desk-scale stand-in for a frozen pretrained
backbone), then aggregates the resulting tokens with a small cross-attention
resampler into exactly K embeddings, matching the latent-query bank shape
slot for slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import DiffTensor


@dataclass(frozen=True)
class EncoderConfig:
    d: int
    patch: int
    frame_hw: int
    channels: int = 3
    max_frames: int = 16
    K: int = 4                 # resampler query count == latent query count
    resampler_layers: int = 2
    frozen_seed: int = 20240501  # fixed seed for the frozen future-path projector

    @property
    def patches_per_frame(self):
        return (self.frame_hw // self.patch) ** 2

    @property
    def patch_dim(self):
        return self.channels * self.patch * self.patch


def _check_divisible(cfg, h, w):
    if h % cfg.patch or w % cfg.patch:
        raise ValueError(f"frame size {h}x{w} not divisible by patch size {cfg.patch}")


def init_patch_projector_params(cfg, rng, prefix):
    d = cfg.d
    return {
        f"{prefix}.patch_w": nm.tensor(rng.normal(0.0, 0.02, (cfg.patch_dim, d)), requires_grad=True),
        f"{prefix}.patch_b": nm.tensor(np.zeros(d), requires_grad=True),
        f"{prefix}.pos_emb": nm.tensor(rng.normal(0.0, 0.02, (cfg.patches_per_frame, d)), requires_grad=True),
        f"{prefix}.frame_emb": nm.tensor(rng.normal(0.0, 0.02, (cfg.max_frames, d)), requires_grad=True),
    }


def init_context_encoder_params(cfg, rng):
    return init_patch_projector_params(cfg, rng, "ctxenc")


def init_future_encoder_params(cfg, rng):
    """Frozen projector params (own fixed seed) plus trainable resampler params."""
    frozen_rng = np.random.default_rng(cfg.frozen_seed)
    frozen = init_patch_projector_params(cfg, frozen_rng, "futenc.frozen")
    for t in frozen.values():
        t.requires_grad = False

    d = cfg.d
    trainable = {
        "futenc.res.queries": nm.tensor(rng.normal(0.0, 0.02, (cfg.K, d)), requires_grad=True),
    }
    for i in range(cfg.resampler_layers):
        p = f"futenc.res.layer{i}"
        trainable.update({
            f"{p}.ln_q": nm.tensor(np.ones(d), requires_grad=True),
            f"{p}.wq": nm.tensor(rng.normal(0.0, 0.02, (d, d)), requires_grad=True),
            f"{p}.wk": nm.tensor(rng.normal(0.0, 0.02, (d, d)), requires_grad=True),
            f"{p}.wv": nm.tensor(rng.normal(0.0, 0.02, (d, d)), requires_grad=True),
            f"{p}.wo": nm.tensor(rng.normal(0.0, 0.02, (d, d)), requires_grad=True),
            f"{p}.ln_f": nm.tensor(np.ones(d), requires_grad=True),
            f"{p}.ffn_w1": nm.tensor(rng.normal(0.0, 0.02, (d, 2 * d)), requires_grad=True),
            f"{p}.ffn_w2": nm.tensor(rng.normal(0.0, 0.02, (2 * d, d)), requires_grad=True),
        })
    return frozen, trainable


def patchify(frames, patch):
    """[B, F, C, h, w] -> [B, F*(h/p)*(w/p), C*p*p], differentiable."""
    b, f, c, h, w = frames.shape
    hp, wp = h // patch, w // patch
    x = nm.reshape(frames, (b, f, c, hp, patch, wp, patch))
    x = nm.transpose(x, (0, 1, 3, 5, 2, 4, 6))
    return nm.reshape(x, (b, f * hp * wp, c * patch * patch))


def _project_frames(frames, params, cfg, prefix):
    if not isinstance(frames, DiffTensor):
        frames = nm.tensor(frames)
    if frames.values.ndim == 4:  # single example
        frames = nm.reshape(frames, (1,) + frames.shape)
    b, f, c, h, w = frames.shape
    _check_divisible(cfg, h, w)
    ppf = (h // cfg.patch) * (w // cfg.patch)

    tokens = nm.linear(patchify(frames, cfg.patch),
                       params[f"{prefix}.patch_w"], params[f"{prefix}.patch_b"])
    pos = nm.broadcast_to(nm.reshape(params[f"{prefix}.pos_emb"][:ppf], (1, 1, ppf, cfg.d)),
                          (b, f, ppf, cfg.d))
    frm = nm.broadcast_to(nm.reshape(params[f"{prefix}.frame_emb"][:f], (1, f, 1, cfg.d)),
                          (b, f, ppf, cfg.d))
    emb = nm.reshape(nm.add(pos, frm), (b, f * ppf, cfg.d))
    return nm.add(tokens, emb)


def encode_context(frames, params, cfg):
    """Trainable per-frame patch tokens: [B, n_frames*(h/p)*(w/p), d]."""
    return _project_frames(frames, params, cfg, "ctxenc")


def _resampler_layer(latents, tokens, params, prefix, d):
    q = nm.matmul(nm.rms_norm(latents, params[f"{prefix}.ln_q"]), params[f"{prefix}.wq"])
    k = nm.matmul(tokens, params[f"{prefix}.wk"])
    v = nm.matmul(tokens, params[f"{prefix}.wv"])
    scores = nm.mul(nm.matmul(q, nm.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d))
    attn = nm.masked_softmax(scores, np.ones(scores.shape[-2:], dtype=bool))
    latents = nm.add(latents, nm.matmul(nm.matmul(attn, v), params[f"{prefix}.wo"]))
    h = nm.rms_norm(latents, params[f"{prefix}.ln_f"])
    ffn = nm.matmul(nm.relu(nm.matmul(h, params[f"{prefix}.ffn_w1"])), params[f"{prefix}.ffn_w2"])
    return nm.add(latents, ffn)


def encode_future(frames, frozen_params, resampler_params, cfg):
    """Future embeddings z of shape [B, K, d] via frozen projector + resampler."""
    tokens = _project_frames(frames, frozen_params, cfg, "futenc.frozen")
    b = tokens.shape[0]
    latents = nm.broadcast_to(
        nm.reshape(resampler_params["futenc.res.queries"], (1, cfg.K, cfg.d)),
        (b, cfg.K, cfg.d))
    for i in range(cfg.resampler_layers):
        latents = _resampler_layer(latents, tokens, resampler_params,
                                   f"futenc.res.layer{i}", cfg.d)
    return latents


def frozen_checksum(frozen_params):
    """Stable digest of the frozen projector parameters."""
    import hashlib
    h = hashlib.sha256()
    for name in sorted(frozen_params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(frozen_params[name].values).tobytes())
    return h.hexdigest()
