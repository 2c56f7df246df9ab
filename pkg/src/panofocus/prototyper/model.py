"""
Bidirectional hierarchical encoder with prototype attention.

Three encoding blocks operate at the patch, individual and group levels.
Each block's bottom-up half is a CLS-token transformer layer plus a
prototype-pooling branch; its top-down half cross-attends the level's
tokens to a higher-level summary. Inputs flow patch -> individual ->
group -> global and back down global -> group -> individual.

All weights follow the row-vector convention ``y = x @ W``. Weight
values may be numpy arrays or :class:`Tensor` leaves; pass Tensors to
collect gradients.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, fields
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from panofocus.prototyper.autograd import Tensor, as_tensor, concat, gelu, softmax

LEVELS = ("patch", "ind", "group")
CME_LEVELS = ("ind", "group")
TOKEN_LEVELS = ("patch", "individual", "group", "global")
UPDATE_GUARD = 1e-12

Gumbel = Union[None, np.random.Generator, np.ndarray, Sequence[float]]


@dataclass(frozen=True)
class PrototyperConfig:
    d: int = 32
    heads: int = 4
    prototypes: int = 4
    m_max: int = 256
    mlp_ratio: int = 4
    n_ind: int = 27
    n_group: int = 11
    n_global: int = 7
    init_std: float = 0.02

    def __post_init__(self):
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d ({self.d})")
        if self.prototypes < 1:
            raise ValueError("need at least one prototype per level")
        if self.m_max < 1:
            raise ValueError("m_max must be >= 1")
        if min(self.n_ind, self.n_group, self.n_global) < 1:
            raise ValueError("label spaces must be non-empty")


@dataclass
class TokenMatrix:
    rows: np.ndarray
    level: str

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if self.level not in TOKEN_LEVELS:
            raise ValueError(f"unknown token level {self.level!r}")
        if self.rows.shape[0] < 1:
            raise ValueError("a token matrix needs at least one row")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("token matrix contains non-finite entries")


@dataclass
class PrototypeBank:
    prototypes: object  # J x d array or Tensor
    level: str


@dataclass
class UBEWeights:
    cls_token: object
    positional: object
    msa_q: object
    msa_k: object
    msa_v: object
    msa_o: object
    mlp_w1: object
    mlp_b1: object
    mlp_w2: object
    mlp_b2: object
    proto_query: object
    proto_key: object
    proto_value: object
    proto_out: object
    mca_q: object = None
    mca_k: object = None
    mca_v: object = None
    mca_o: object = None
    cme_w1: object = None
    cme_b1: object = None
    cme_w2: object = None
    cme_b2: object = None
    heads: int = 4
    seed: int = 0

    @property
    def has_cme(self) -> bool:
        return self.mca_q is not None


_UME_FIELDS = (
    "cls_token", "positional", "msa_q", "msa_k", "msa_v", "msa_o",
    "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
    "proto_query", "proto_key", "proto_value", "proto_out",
)
_CME_FIELDS = ("mca_q", "mca_k", "mca_v", "mca_o", "cme_w1", "cme_b1", "cme_w2", "cme_b2")
HEAD_SHAPES = {
    "ind_w": ("d", "n_ind"), "ind_b": (1, "n_ind"),
    "gro_w": ("d", "n_group"), "gro_b": (1, "n_group"),
    "glo_w": ("d", "n_global"), "glo_b": (1, "n_global"),
    "aff_w": ("d", "d"),
    "det_w": ("d", 6), "det_b": (1, 6),
}


def _block_shapes(cfg: PrototyperConfig, level: str) -> dict[str, tuple[int, int]]:
    d, h = cfg.d, cfg.d * cfg.mlp_ratio
    shapes = {
        "cls_token": (1, d), "positional": (cfg.m_max + 1, d),
        "msa_q": (d, d), "msa_k": (d, d), "msa_v": (d, d), "msa_o": (d, d),
        "mlp_w1": (d, h), "mlp_b1": (1, h), "mlp_w2": (h, d), "mlp_b2": (1, d),
        "proto_query": (d, d), "proto_key": (d, d), "proto_value": (d, d), "proto_out": (d, d),
        "prototypes": (cfg.prototypes, d),
    }
    if level in CME_LEVELS:
        shapes.update({
            "mca_q": (d, d), "mca_k": (d, d), "mca_v": (d, d), "mca_o": (d, d),
            "cme_w1": (d, h), "cme_b1": (1, h), "cme_w2": (h, d), "cme_b2": (1, d),
        })
    return shapes


def parameter_shapes(cfg: PrototyperConfig) -> dict[str, tuple[int, int]]:
    """Every named weight matrix of the model with its expected shape."""
    shapes = {}
    for level in LEVELS:
        for name, shape in _block_shapes(cfg, level).items():
            shapes[f"{level}.{name}"] = shape
    lookup = {"d": cfg.d, "n_ind": cfg.n_ind, "n_group": cfg.n_group, "n_global": cfg.n_global}
    for name, (r, c) in HEAD_SHAPES.items():
        shapes[f"head.{name}"] = (lookup.get(r, r), lookup.get(c, c))
    return shapes


def init_params(cfg: PrototyperConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Gaussian(0, init_std) weights, zero biases, deterministic in `seed`."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if re.fullmatch(r"\w+_b\d?", name.split(".", 1)[1]):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, cfg.init_std, size=shape)
    return params


def validate_params(params: Mapping[str, np.ndarray], cfg: PrototyperConfig) -> None:
    expected = parameter_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(f"weights do not match architecture: missing={missing} unexpected={extra}")
    for name, shape in expected.items():
        arr = np.asarray(params[name].data if isinstance(params[name], Tensor) else params[name])
        if arr.shape != shape:
            raise ValueError(f"weight {name!r} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"weight {name!r} contains non-finite values")


def ube_weights(params: Mapping[str, object], level: str, heads: int, seed: int = 0) -> UBEWeights:
    kw = {f: params[f"{level}.{f}"] for f in _UME_FIELDS}
    if level in CME_LEVELS:
        kw.update({f: params[f"{level}.{f}"] for f in _CME_FIELDS})
    return UBEWeights(heads=heads, seed=seed, **kw)


def prototype_bank(params: Mapping[str, object], level: str) -> PrototypeBank:
    return PrototypeBank(params[f"{level}.prototypes"], level)


def _rows(x) -> Tensor:
    if isinstance(x, TokenMatrix):
        return Tensor(x.rows)
    t = as_tensor(x)
    if t.data.ndim == 1:
        t = t.reshape(1, -1)
    return t


def mlp(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return gelu(x @ w1 + b1) @ w2 + b2


def multi_head_attention(
    queries: Tensor,
    keys_values: Tensor,
    wq, wk, wv, wo,
    heads: int,
    trace: Optional[list] = None,
) -> Tensor:
    """Scaled dot-product attention with `heads` column-split heads."""
    d = queries.shape[1]
    dh = d // heads
    q = queries @ wq
    k = keys_values @ wk
    v = keys_values @ wv
    outs = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        attn = softmax((q[:, cols] @ k[:, cols].T) * (1.0 / math.sqrt(dh)), axis=1)
        if trace is not None:
            trace.append(attn.data)
        outs.append(attn @ v[:, cols])
    return concat(outs, axis=1) @ wo


def ume_self_attention(x, w: UBEWeights, trace: Optional[dict] = None) -> tuple[Tensor, Tensor]:
    """CLS-token transformer layer. Returns (CLS output row, all hidden rows).

    An empty token matrix (0 x d) is accepted; only the CLS token is encoded.
    """
    x = _rows(x)
    m = x.shape[0]
    pos = as_tensor(w.positional)
    if m + 1 > pos.shape[0]:
        raise ValueError(f"{m} tokens exceed the positional table ({pos.shape[0] - 1} max)")
    z = concat([as_tensor(w.cls_token), x], axis=0) + pos[: m + 1]
    attn_log = trace.setdefault("msa", []) if trace is not None else None
    z_bar = multi_head_attention(z, z, w.msa_q, w.msa_k, w.msa_v, w.msa_o, w.heads, attn_log) + z
    z_hat = mlp(z_bar, w.mlp_w1, w.mlp_b1, w.mlp_w2, w.mlp_b2) + z_bar
    return z_hat[0:1], z_hat


def _gumbel_sample(gumbel: Gumbel, j: int) -> Optional[np.ndarray]:
    if gumbel is None:
        return None
    if isinstance(gumbel, np.random.Generator):
        return gumbel.gumbel(0.0, 1.0, size=j)
    noise = np.asarray(gumbel, dtype=np.float64).reshape(-1)
    if noise.shape != (j,):
        raise ValueError(f"expected {j} Gumbel samples, got {noise.shape}")
    return noise


def prototype_attention(
    x, bank: PrototypeBank, w: UBEWeights, gumbel: Gumbel = None
) -> tuple[Tensor, Tensor, Tensor]:
    """Soft-assign tokens to prototypes and pool the updated prototypes.

    Args:
        x: M x d tokens.
        bank: J x d prototypes.
        w: block weights (proto_query/key/value/out are used).
        gumbel: None disables noise; a Generator draws one Gumbel(0, 1)
            sample per prototype; an explicit length-J array is used as is.

    Returns:
        (o_r 1 x d, A M x J with rows summing to 1, updated prototypes J x d)
    """
    x = _rows(x)
    protos = as_tensor(bank.prototypes)
    j = protos.shape[0]
    noise = _gumbel_sample(gumbel, j)
    if x.shape[0] == 0:
        return protos.mean(axis=0, keepdims=True), Tensor(np.zeros((0, j))), protos

    logits = (x @ w.proto_key) @ (protos @ w.proto_query).T
    if noise is not None:
        logits = logits + noise[None, :]
    A = softmax(logits, axis=1)

    weight = A.sum(axis=0)
    starved = weight.data < UPDATE_GUARD
    if starved.any():
        warnings.warn(
            f"prototypes {np.flatnonzero(starved).tolist()} received no attention; left unchanged",
            RuntimeWarning,
            stacklevel=2,
        )
    denom = weight + starved.astype(np.float64)
    pooled = (A.T @ (x @ w.proto_value)) / denom.reshape(-1, 1)
    update = (pooled @ w.proto_out) * (~starved).astype(np.float64)[:, None]
    updated = protos + update
    return updated.mean(axis=0, keepdims=True), A, updated


def ube_bottom_up(x, bank: PrototypeBank, w: UBEWeights, gumbel: Gumbel = None) -> Tensor:
    """Sum of the CLS output and the pooled prototypes: one 1 x d summary token."""
    o_u, _ = ume_self_attention(x, w)
    o_r, _, _ = prototype_attention(x, bank, w, gumbel)
    return o_u + o_r


def cme_top_down(x_low, o_high, w: UBEWeights, trace: Optional[dict] = None) -> Tensor:
    """Cross-attend low-level tokens to high-level tokens, then average-pool.

    The residual MLP output is pooled over tokens to one 1 x d row.
    """
    if not w.has_cme:
        raise ValueError("this block has no top-down weights")
    x_low = _rows(x_low)
    o_high = _rows(o_high)
    if x_low.shape[1] != o_high.shape[1]:
        raise ValueError(f"width mismatch: {x_low.shape[1]} vs {o_high.shape[1]}")
    attn_log = trace.setdefault("mca", []) if trace is not None else None
    x_bar = multi_head_attention(x_low, o_high, w.mca_q, w.mca_k, w.mca_v, w.mca_o, w.heads, attn_log) + x_low
    out = mlp(x_bar, w.cme_w1, w.cme_b1, w.cme_w2, w.cme_b2) + x_bar
    return out.mean(axis=0, keepdims=True)


@dataclass
class Hierarchy:
    """Features at every level of one forward/backward sweep."""

    ind_forward: Tensor  # Q x d, before top-down refinement
    group_forward: Tensor  # L x d
    glo: Tensor  # 1 x d
    gro: Tensor  # L x d, refined by the global token
    ind: Tensor  # Q x d, refined by each individual's group

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name).data for f in fields(self)}


def _group_lookup(groups: Sequence[Sequence[int]], q: int) -> list[int]:
    owner = [-1] * q
    for g, members in enumerate(groups):
        if not members:
            raise ValueError(f"group {g} is empty")
        for m in members:
            if not 0 <= m < q:
                raise ValueError(f"group {g} names individual {m}, but only {q} exist")
            if owner[m] != -1:
                raise ValueError(f"individual {m} belongs to groups {owner[m]} and {g}")
            owner[m] = g
    uncovered = [i for i, g in enumerate(owner) if g == -1]
    if uncovered:
        raise ValueError(f"individuals {uncovered} are not covered by any group")
    return owner


def forward_bipropagate(
    patches: Sequence,
    groups: Sequence[Sequence[int]],
    params: Mapping[str, object],
    cfg: PrototyperConfig,
    gumbel: Gumbel = None,
) -> Hierarchy:
    """Run the full bottom-up then top-down sweep.

    Args:
        patches: one N_q x d patch-token matrix per individual.
        groups: member indices per group; must partition range(len(patches)).
        params: named weights (see :func:`parameter_shapes`).
        gumbel: noise source shared by all prototype branches in this pass.
            A Generator is drawn from in call order; pass None to disable.
    """
    if gumbel is not None and not isinstance(gumbel, np.random.Generator):
        raise ValueError("forward_bipropagate takes a Generator or None for Gumbel noise")
    q = len(patches)
    owner = _group_lookup(groups, q)
    blocks = {lvl: ube_weights(params, lvl, cfg.heads) for lvl in LEVELS}
    banks = {lvl: prototype_bank(params, lvl) for lvl in LEVELS}
    empty = Tensor(np.zeros((0, cfg.d)))

    ind_rows = [ube_bottom_up(p, banks["patch"], blocks["patch"], gumbel) for p in patches]
    ind_fwd = concat(ind_rows, axis=0) if ind_rows else empty
    gro_rows = [ube_bottom_up(ind_fwd[list(m)], banks["ind"], blocks["ind"], gumbel) for m in groups]
    gro_fwd = concat(gro_rows, axis=0) if gro_rows else empty
    glo = ube_bottom_up(gro_fwd, banks["group"], blocks["group"], gumbel)

    gro = [cme_top_down(gro_fwd[g : g + 1], glo, blocks["group"]) for g in range(len(groups))]
    gro_t = concat(gro, axis=0) if gro else empty
    ind = [cme_top_down(ind_fwd[i : i + 1], gro_t[owner[i] : owner[i] + 1], blocks["ind"]) for i in range(q)]
    ind_t = concat(ind, axis=0) if ind else empty
    return Hierarchy(ind_fwd, gro_fwd, glo, gro_t, ind_t)


@dataclass
class HeadOutputs:
    ind: Tensor  # Q x n_ind
    group: Tensor  # L x n_group
    glo: Tensor  # 1 x n_global
    affinity: Tensor  # Q x Q
    detection: Tensor  # Q x 6: box offsets (tx, ty, tw, th), objectness, person logit


def recognition_heads(h: Hierarchy, params: Mapping[str, object]) -> HeadOutputs:
    """Linear multi-label heads plus the membership-affinity and detection heads."""
    p = {k: params[f"head.{k}"] for k in HEAD_SHAPES}
    return HeadOutputs(
        ind=h.ind @ p["ind_w"] + p["ind_b"],
        group=h.gro @ p["gro_w"] + p["gro_b"],
        glo=h.glo @ p["glo_w"] + p["glo_b"],
        affinity=(h.ind @ p["aff_w"]) @ h.ind.T,
        detection=h.ind @ p["det_w"] + p["det_b"],
    )


def decode_boxes(anchors: np.ndarray, offsets: Tensor) -> Tensor:
    """Apply (tx, ty, tw, th) offsets to x, y, w, h anchors."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    xy = offsets[:, 0:2] * anchors[:, 2:4] + anchors[:, 0:2]
    wh = offsets[:, 2:4].exp() * anchors[:, 2:4]
    return concat([xy, wh], axis=1)
