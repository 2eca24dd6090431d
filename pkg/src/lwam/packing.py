"""Packed dual-branch token layout and the attention mask that isolates branches.

One packed sequence carries the shared context followed by two structurally
mirrored blocks: the deployable prior block (latent queries + action slots)
and the training-only posterior block (future embeddings + action slots).
Mirrored slots share position IDs so the two branches stay aligned inside
attention; the mask keeps them from ever attending to each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class TokenRole(IntEnum):
    INSTRUCTION = 0
    CONTEXT_OBS = 1
    STATE = 2
    LATENT_QUERY = 3
    FUTURE_EMBED = 4
    PRIOR_ACTION = 5
    POST_ACTION = 6


class Branch(IntEnum):
    SHARED = 0
    PRIOR = 1
    POSTERIOR = 2


# role -> branch membership
_ROLE_BRANCH = {
    TokenRole.INSTRUCTION: Branch.SHARED,
    TokenRole.CONTEXT_OBS: Branch.SHARED,
    TokenRole.STATE: Branch.SHARED,
    TokenRole.LATENT_QUERY: Branch.PRIOR,
    TokenRole.PRIOR_ACTION: Branch.PRIOR,
    TokenRole.FUTURE_EMBED: Branch.POSTERIOR,
    TokenRole.POST_ACTION: Branch.POSTERIOR,
}


@dataclass(frozen=True)
class PackedLayout:
    """Slot-role assignment and shared position IDs for one packed sequence."""

    total_len: int
    roles: np.ndarray         # int array [total_len] of TokenRole
    position_ids: np.ndarray  # int array [total_len]
    branch: np.ndarray        # int array [total_len] of Branch
    n_instr: int
    n_ctx_tokens: int
    n_state: int
    K: int
    T: int
    branches: str             # "dual" | "prior_only" | "posterior_only"

    @property
    def context_len(self):
        return self.n_instr + self.n_ctx_tokens + self.n_state

    def slots_of(self, role):
        return np.flatnonzero(self.roles == int(role))

    @property
    def latent_slots(self):
        return self.slots_of(TokenRole.LATENT_QUERY)

    @property
    def future_slots(self):
        return self.slots_of(TokenRole.FUTURE_EMBED)

    @property
    def prior_action_slots(self):
        return self.slots_of(TokenRole.PRIOR_ACTION)

    @property
    def post_action_slots(self):
        return self.slots_of(TokenRole.POST_ACTION)

    def to_dict(self):
        return {
            "total_len": self.total_len,
            "roles": self.roles.tolist(),
            "position_ids": self.position_ids.tolist(),
            "branch": self.branch.tolist(),
            "n_instr": self.n_instr,
            "n_ctx_tokens": self.n_ctx_tokens,
            "n_state": self.n_state,
            "K": self.K,
            "T": self.T,
            "branches": self.branches,
        }

    @staticmethod
    def from_dict(d):
        return PackedLayout(
            total_len=int(d["total_len"]),
            roles=np.asarray(d["roles"], dtype=np.int64),
            position_ids=np.asarray(d["position_ids"], dtype=np.int64),
            branch=np.asarray(d["branch"], dtype=np.int64),
            n_instr=int(d["n_instr"]),
            n_ctx_tokens=int(d["n_ctx_tokens"]),
            n_state=int(d["n_state"]),
            K=int(d["K"]),
            T=int(d["T"]),
            branches=str(d["branches"]),
        )


@dataclass(frozen=True)
class DualBranchMask:
    """allow[q][k] is True when query slot q may attend key slot k."""

    allow: np.ndarray  # bool [total_len, total_len]

    def to_dict(self):
        return {"allow": self.allow.astype(int).tolist()}

    @staticmethod
    def from_dict(d):
        return DualBranchMask(allow=np.asarray(d["allow"], dtype=bool))


def build_layout(n_instr, n_ctx_tokens, n_state, K, T, branches="dual",
                 allow_empty_latent=False):
    """Assemble the packed layout: shared context, then prior, then posterior.

    Position IDs run 0..C-1 over the context; latent-query slot k and
    future-embed slot k both sit at C+k, and the two branches' action slots i
    both sit at C+K+i.

    ``allow_empty_latent`` admits K=0 for the no-latent ablation baseline;
    the public contract otherwise requires at least one latent slot.
    """
    if branches not in ("dual", "prior_only", "posterior_only"):
        raise ValueError(f"unknown branches mode {branches!r}")
    if n_instr < 1 or n_ctx_tokens < 1:
        raise ValueError("n_instr and n_ctx_tokens must be >= 1")
    if n_state < 0:
        raise ValueError("n_state must be >= 0")
    if K == 0 and not allow_empty_latent:
        raise ValueError("K=0: latent slots are mandatory (pass allow_empty_latent for the ablation)")
    if K < 0 or T < 1:
        raise ValueError("need K >= 0 and T >= 1 (action chunk is mandatory)")

    roles = (
        [TokenRole.INSTRUCTION] * n_instr
        + [TokenRole.CONTEXT_OBS] * n_ctx_tokens
        + [TokenRole.STATE] * n_state
    )
    c = len(roles)
    pos = list(range(c))
    if branches in ("dual", "prior_only"):
        roles += [TokenRole.LATENT_QUERY] * K + [TokenRole.PRIOR_ACTION] * T
        pos += [c + k for k in range(K)] + [c + K + i for i in range(T)]
    if branches in ("dual", "posterior_only"):
        roles += [TokenRole.FUTURE_EMBED] * K + [TokenRole.POST_ACTION] * T
        pos += [c + k for k in range(K)] + [c + K + i for i in range(T)]

    roles_arr = np.array([int(r) for r in roles], dtype=np.int64)
    branch_arr = np.array([int(_ROLE_BRANCH[r]) for r in roles], dtype=np.int64)
    return PackedLayout(
        total_len=len(roles),
        roles=roles_arr,
        position_ids=np.asarray(pos, dtype=np.int64),
        branch=branch_arr,
        n_instr=n_instr,
        n_ctx_tokens=n_ctx_tokens,
        n_state=n_state,
        K=K,
        T=T,
        branches=branches,
    )


def build_mask(layout):
    """Dual-branch attention mask.

    Rules: shared queries see only shared keys; prior queries see shared and
    prior keys; posterior queries see shared and posterior keys. Attention is
    bidirectional inside the shared block and inside each branch.
    """
    b = layout.branch
    qb = b[:, None]
    kb = b[None, :]
    allow = (kb == int(Branch.SHARED)) | (qb == kb)
    return DualBranchMask(allow=allow)


def strip_branch(layout, mask, branch):
    """Delete one branch's slots, keeping the shared context and the other branch.

    Position IDs of the surviving slots are preserved, so a stripped layout is
    interchangeable with a directly constructed single-branch layout.
    """
    branch = Branch(branch)
    if branch == Branch.SHARED:
        raise ValueError("cannot strip the shared context")
    keep = layout.branch != int(branch)
    kept_modes = {Branch.PRIOR: "posterior_only", Branch.POSTERIOR: "prior_only"}
    new_layout = PackedLayout(
        total_len=int(keep.sum()),
        roles=layout.roles[keep].copy(),
        position_ids=layout.position_ids[keep].copy(),
        branch=layout.branch[keep].copy(),
        n_instr=layout.n_instr,
        n_ctx_tokens=layout.n_ctx_tokens,
        n_state=layout.n_state,
        K=layout.K,
        T=layout.T,
        branches=kept_modes[branch],
    )
    idx = np.flatnonzero(keep)
    new_mask = DualBranchMask(allow=mask.allow[np.ix_(idx, idx)].copy())
    return new_layout, new_mask
