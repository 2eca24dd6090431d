"""Mixture-of-transformers backbone over the packed dual-branch sequence.

A single joint masked attention runs over all slots while expert parameters
are routed by role: state and action slots use the (smaller) action expert,
everything else uses the understanding expert. Position IDs enter attention
through a rotation applied to queries and keys, so mirrored prior/posterior
slots are treated identically. Velocity heads read the action slots of each
branch; alignment taps collect post-residual hidden states at the latent and
future-embed slots of the last ``align_last_L`` layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import DiffTensor
from .packing import TokenRole

ACTION_EXPERT_ROLES = (TokenRole.STATE, TokenRole.PRIOR_ACTION, TokenRole.POST_ACTION)


@dataclass(frozen=True)
class MoTConfig:
    d: int
    n_layers: int
    n_heads: int
    align_last_L: int
    action_dim: int
    state_dim: int = 4
    vocab_size: int = 16
    ffn_mult_understanding: int = 4
    ffn_mult_action: int = 2
    time_feats: int = 16
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"hidden width {self.d} not divisible by {self.n_heads} heads")
        if self.n_layers and not (1 <= self.align_last_L <= self.n_layers):
            raise ValueError("align_last_L must lie in [1, n_layers]")

    @property
    def head_dim(self):
        return self.d // self.n_heads

    @property
    def tapped_layers(self):
        return list(range(self.n_layers - self.align_last_L, self.n_layers))


@dataclass
class AlignmentTaps:
    """Per-layer hidden states at the latent (prior) and future (posterior) slots."""

    prior: list = field(default_factory=list)   # [B, K, d] per tapped layer
    post: list = field(default_factory=list)
    layer_indices: list = field(default_factory=list)


@dataclass
class ForwardResult:
    velocity_prior: DiffTensor          # [B, T, A]
    velocity_post: DiffTensor | None    # [B, T, A] in dual/posterior modes
    taps: AlignmentTaps


def init_backbone_params(cfg, K, rng):
    d = cfg.d
    p = {
        "latent_q": nm.tensor(rng.normal(0.0, 0.02, (K, d)), requires_grad=True),
        "embed.instr": nm.tensor(rng.normal(0.0, 0.02, (cfg.vocab_size, d)), requires_grad=True),
        "embed.state_w": nm.tensor(rng.normal(0.0, 0.02, (cfg.state_dim, d)), requires_grad=True),
        "embed.state_b": nm.tensor(np.zeros(d), requires_grad=True),
        "embed.action_w": nm.tensor(rng.normal(0.0, 0.02, (cfg.action_dim, d)), requires_grad=True),
        "embed.action_b": nm.tensor(np.zeros(d), requires_grad=True),
        "embed.time_w1": nm.tensor(rng.normal(0.0, 0.02, (cfg.time_feats, d)), requires_grad=True),
        "embed.time_b1": nm.tensor(np.zeros(d), requires_grad=True),
        "embed.time_w2": nm.tensor(rng.normal(0.0, 0.02, (d, d)), requires_grad=True),
        "embed.time_b2": nm.tensor(np.zeros(d), requires_grad=True),
        # zero-initialized head: an untrained model emits a zero velocity field
        "head.ln": nm.tensor(np.ones(d), requires_grad=True),
        "head.w": nm.tensor(np.zeros((d, cfg.action_dim)), requires_grad=True),
        "head.b": nm.tensor(np.zeros(cfg.action_dim), requires_grad=True),
    }
    for i in range(cfg.n_layers):
        for expert, mult in (("und", cfg.ffn_mult_understanding), ("act", cfg.ffn_mult_action)):
            pref = f"layer{i}.{expert}"
            p[f"{pref}.ln1"] = nm.tensor(np.ones(d), requires_grad=True)
            for w in ("wq", "wk", "wv", "wo"):
                p[f"{pref}.{w}"] = nm.tensor(rng.normal(0.0, 0.02, (d, d)), requires_grad=True)
            p[f"{pref}.ln2"] = nm.tensor(np.ones(d), requires_grad=True)
            p[f"{pref}.ffn_w1"] = nm.tensor(rng.normal(0.0, 0.02, (d, mult * d)), requires_grad=True)
            p[f"{pref}.ffn_w2"] = nm.tensor(rng.normal(0.0, 0.02, (mult * d, d)), requires_grad=True)
    return p


def time_features(t, n_feats, dtype=np.float64):
    """Sinusoidal features of the flow time, [B, n_feats]; not differentiated."""
    t = np.atleast_1d(np.asarray(t, dtype=dtype))
    half = n_feats // 2
    freqs = np.pi * (2.0 ** np.arange(half, dtype=dtype))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def embed_slots(layout, params, cfg, instr_ids, ctx_tokens, state, a_t, t, z_post=None):
    """Fill the packed sequence rows per role; returns [B, total_len, d].

    Both branches receive the same interpolated action ``a_t``; the flow-time
    embedding is added to every action slot. ``z_post`` is required exactly
    when the layout carries a posterior branch.
    """
    b = ctx_tokens.shape[0]
    has_post = layout.branches in ("dual", "posterior_only")
    has_prior = layout.branches in ("dual", "prior_only")
    if has_post and z_post is None:
        raise ValueError("layout has a posterior branch but z_post is missing")

    instr = nm.embedding_lookup(params["embed.instr"], np.asarray(instr_ids, dtype=np.int64))
    pieces = [instr, ctx_tokens]
    if layout.n_state:
        if not isinstance(state, DiffTensor):
            state = nm.tensor(state, dtype=ctx_tokens.dtype)
        srow = nm.linear(state, params["embed.state_w"], params["embed.state_b"])
        pieces.append(nm.reshape(srow, (b, 1, cfg.d)))

    if not isinstance(a_t, DiffTensor):
        a_t = nm.tensor(a_t, dtype=ctx_tokens.dtype)
    feats = nm.tensor(time_features(t, cfg.time_feats, dtype=ctx_tokens.dtype))
    te = nm.linear(nm.relu(nm.linear(feats, params["embed.time_w1"], params["embed.time_b1"])),
                   params["embed.time_w2"], params["embed.time_b2"])
    act = nm.add(nm.linear(a_t, params["embed.action_w"], params["embed.action_b"]),
                 nm.reshape(te, (b, 1, cfg.d)))

    if has_prior and layout.K:
        pieces.append(nm.broadcast_to(
            nm.reshape(params["latent_q"], (1, layout.K, cfg.d)), (b, layout.K, cfg.d)))
    if has_prior:
        pieces.append(act)
    if has_post:
        pieces.append(z_post)
        pieces.append(act)
    return nm.concatenate(pieces, axis=1)


def _rope_tables(layout, cfg, dtype):
    hd = cfg.head_dim
    half = hd // 2
    inv_freq = cfg.rope_base ** (-np.arange(half, dtype=dtype) / half)
    ang = layout.position_ids.astype(dtype)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1)
    return cos, sin


def _rotate_half(x, hd):
    x1 = x[..., : hd // 2]
    x2 = x[..., hd // 2:]
    return nm.concatenate([nm.neg(x2), x1], axis=-1)


def _apply_rope(x, cos, sin, hd):
    return nm.add(nm.mul(x, nm.tensor(cos)), nm.mul(_rotate_half(x, hd), nm.tensor(sin)))


def _split_heads(x, b, n, cfg):
    x = nm.reshape(x, (b, n, cfg.n_heads, cfg.head_dim))
    return nm.reshape(nm.transpose(x, (0, 2, 1, 3)), (b * cfg.n_heads, n, cfg.head_dim))


def _merge_heads(x, b, n, cfg):
    x = nm.reshape(x, (b, cfg.n_heads, n, cfg.head_dim))
    return nm.reshape(nm.transpose(x, (0, 2, 1, 3)), (b, n, cfg.d))


def _routed(x, idx_act, idx_und, fn_act, fn_und, total):
    ya = nm.scatter(fn_act(nm.gather(x, idx_act, 1)), idx_act, 1, total)
    yu = nm.scatter(fn_und(nm.gather(x, idx_und, 1)), idx_und, 1, total)
    return nm.add(ya, yu)


def forward(layout, mask, slots, params, cfg):
    """Run the packed sequence through the backbone.

    ``slots`` is [B, total_len, d] (a single [total_len, d] example is
    promoted). Returns velocity fields for whichever branches the layout
    carries, plus alignment taps at the tapped layers.
    """
    x = slots
    if x.values.ndim == 2:
        x = nm.reshape(x, (1,) + x.shape)
    b, n, d = x.shape
    if n != layout.total_len or d != cfg.d:
        raise nm.ShapeError(f"slots shape {x.shape} does not match layout len {layout.total_len}, d {cfg.d}")

    idx_act = np.flatnonzero(np.isin(layout.roles, [int(r) for r in ACTION_EXPERT_ROLES]))
    idx_und = np.setdiff1d(np.arange(n), idx_act)
    cos, sin = _rope_tables(layout, cfg, x.dtype.type)
    scale = 1.0 / np.sqrt(cfg.head_dim)
    tapped = set(cfg.tapped_layers)
    taps = AlignmentTaps(layer_indices=sorted(tapped))
    latent_slots = layout.latent_slots
    future_slots = layout.future_slots

    for i in range(cfg.n_layers):
        pa, pu = f"layer{i}.act", f"layer{i}.und"

        def proj(name):
            return _routed(
                x, idx_act, idx_und,
                lambda h, nm_=name: nm.matmul(nm.rms_norm(h, params[f"{pa}.ln1"]), params[f"{pa}.{nm_}"]),
                lambda h, nm_=name: nm.matmul(nm.rms_norm(h, params[f"{pu}.ln1"]), params[f"{pu}.{nm_}"]),
                n)

        q = _apply_rope(_split_heads(proj("wq"), b, n, cfg), cos, sin, cfg.head_dim)
        k = _apply_rope(_split_heads(proj("wk"), b, n, cfg), cos, sin, cfg.head_dim)
        v = _split_heads(proj("wv"), b, n, cfg)

        attn = nm.masked_softmax(nm.mul(nm.matmul(q, nm.transpose(k, (0, 2, 1))), scale), mask.allow)
        ctxv = _merge_heads(nm.matmul(attn, v), b, n, cfg)
        out = _routed(ctxv, idx_act, idx_und,
                      lambda h: nm.matmul(h, params[f"{pa}.wo"]),
                      lambda h: nm.matmul(h, params[f"{pu}.wo"]),
                      n)
        x = nm.add(x, out)

        ffn = _routed(
            x, idx_act, idx_und,
            lambda h: nm.matmul(nm.relu(nm.matmul(nm.rms_norm(h, params[f"{pa}.ln2"]),
                                                  params[f"{pa}.ffn_w1"])), params[f"{pa}.ffn_w2"]),
            lambda h: nm.matmul(nm.relu(nm.matmul(nm.rms_norm(h, params[f"{pu}.ln2"]),
                                                  params[f"{pu}.ffn_w1"])), params[f"{pu}.ffn_w2"]),
            n)
        x = nm.add(x, ffn)

        if i in tapped:
            if latent_slots.size:
                taps.prior.append(nm.gather(x, latent_slots, 1))
            if future_slots.size:
                taps.post.append(nm.gather(x, future_slots, 1))

    def head(slot_idx):
        h = nm.rms_norm(nm.gather(x, slot_idx, 1), params["head.ln"])
        return nm.linear(h, params["head.w"], params["head.b"])

    v_prior = head(layout.prior_action_slots) if layout.branches in ("dual", "prior_only") else None
    v_post = head(layout.post_action_slots) if layout.branches in ("dual", "posterior_only") else None
    return ForwardResult(velocity_prior=v_prior, velocity_post=v_post, taps=taps)


def count_parameters(params, frozen=None):
    """Exact parameter counts by expert and by top-level group."""
    by_name = {name: int(t.values.size) for name, t in params.items()}
    if frozen:
        by_name.update({name: int(t.values.size) for name, t in frozen.items()})

    def total(pred):
        return sum(sz for name, sz in by_name.items() if pred(name))

    table = {
        "by_name": by_name,
        "understanding": total(lambda s: ".und." in s),
        "action": total(lambda s: ".act." in s),
        "embeddings": total(lambda s: s.startswith("embed.") or s == "latent_q"),
        "encoders": total(lambda s: s.startswith(("ctxenc.", "futenc.res."))),
        "frozen": total(lambda s: s.startswith("futenc.frozen.")),
        "head": total(lambda s: s.startswith("head.")),
    }
    table["total"] = sum(by_name.values())
    return table
