"""CVR model: node embedding, per-edge preference scoring, high/low-pass
mixed graph convolution, and the three prediction heads.

Each edge carries a preference p in [-1, 1] that mixes a high-pass filter
(weight (1-p)/2, amplifies node differences) with a low-pass filter
(weight (1+p)/2, retains commonalities). Positive edges are pinned to p = 1;
unlabeled edges get p from a small 2D-conv scoring block over the two
endpoint embeddings reshaped side by side (a linear scorer is available as
an ablation). Aggregation for node u is

    e_u <- eps * e_u0 + sum_i p_ui * e_i / sqrt(d_u d_i)

so p = 0 keeps only the retained initial embedding and p = 1 on a single
1-1 edge with eps = 0 copies the neighbor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, StructuralError
from .graph import ITEM, USER, NeighborSample, SampledEdge, SampledNode
from .pipeline import Label


@dataclass
class ModelConfig:
    n_user_dense: int
    user_vocab_sizes: tuple[int, ...]
    n_item_dense: int
    item_vocab_sizes: tuple[int, ...]
    embed_dim: int = 16  # must be a perfect square for the conv scorer
    conv_channels: int = 4
    conv_kernel: int = 3
    epsilon: float = 0.7
    leaky_slope: float = 0.01
    preference: str = "conve"  # "conve" | "linear"
    aggregator: str = "hlgcn"  # "hlgcn" | "lowpass"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.preference not in ("conve", "linear"):
            raise ConfigError(f"unknown preference scorer {self.preference!r}")
        if self.aggregator not in ("hlgcn", "lowpass"):
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        r = int(round(self.embed_dim**0.5))
        if self.preference == "conve":
            if r * r != self.embed_dim:
                raise ConfigError(
                    f"embed_dim {self.embed_dim} is not a perfect square; "
                    f"required by the 2D reshape of the conv scorer"
                )
            if self.conv_kernel > r:
                raise ConfigError(
                    f"conv kernel {self.conv_kernel} exceeds reshape side {r}"
                )

    @property
    def reshape_side(self) -> int:
        return int(round(self.embed_dim**0.5))

    @property
    def conv_flat_dim(self) -> int:
        r, kk, c = self.reshape_side, self.conv_kernel, self.conv_channels
        return (2 * r - kk + 1) * (r - kk + 1) * c


@dataclass
class ModelParams:
    """All learnable tensors plus the retention scalar epsilon."""

    config: ModelConfig
    user_tables: list[Tensor]
    item_tables: list[Tensor]
    user_embed_w: Tensor
    user_embed_b: Tensor
    item_embed_w: Tensor
    item_embed_b: Tensor
    conv_kernel: Tensor
    conv_bias: Tensor
    conv_proj: Tensor
    pref_w1: Tensor
    pref_b1: Tensor
    pref_w2: Tensor
    pref_b2: Tensor
    heads: dict[str, tuple[Tensor, Tensor, Tensor, Tensor]]  # name -> (w1, b1, w2, b2)

    @property
    def epsilon(self) -> float:
        return self.config.epsilon

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        d = config.embed_dim

        def weight(*shape):
            return Tensor(rng.normal(0.0, 0.1, size=shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        user_tables = [weight(v + 1, d) for v in config.user_vocab_sizes]
        item_tables = [weight(v + 1, d) for v in config.item_vocab_sizes]
        in_u = config.n_user_dense + d * len(user_tables)
        in_i = config.n_item_dense + d * len(item_tables)
        kk, c = config.conv_kernel, config.conv_channels
        heads = {
            name: (weight(2 * d, d), zeros(d), weight(d, 1), zeros(1))
            for name in ("p", "fn", "cvr")
        }
        return cls(
            config=config,
            user_tables=user_tables,
            item_tables=item_tables,
            user_embed_w=weight(in_u, d),
            user_embed_b=zeros(d),
            item_embed_w=weight(in_i, d),
            item_embed_b=zeros(d),
            conv_kernel=weight(kk, kk, c),
            conv_bias=zeros(c),
            conv_proj=weight(config.conv_flat_dim, 1),
            pref_w1=weight(2 * d, d),
            pref_b1=zeros(d),
            pref_w2=weight(d, 1),
            pref_b2=zeros(1),
            heads=heads,
        )

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for f, t in enumerate(self.user_tables):
            out[f"user_table_{f}"] = t
        for f, t in enumerate(self.item_tables):
            out[f"item_table_{f}"] = t
        out.update(
            user_embed_w=self.user_embed_w,
            user_embed_b=self.user_embed_b,
            item_embed_w=self.item_embed_w,
            item_embed_b=self.item_embed_b,
            conv_kernel=self.conv_kernel,
            conv_bias=self.conv_bias,
            conv_proj=self.conv_proj,
            pref_w1=self.pref_w1,
            pref_b1=self.pref_b1,
            pref_w2=self.pref_w2,
            pref_b2=self.pref_b2,
        )
        for name, (w1, b1, w2, b2) in self.heads.items():
            out[f"head_{name}_w1"] = w1
            out[f"head_{name}_b1"] = b1
            out[f"head_{name}_w2"] = w2
            out[f"head_{name}_b2"] = b2
        return out

    def trainable(self) -> list[Tensor]:
        return list(self.named().values())

    def head_params(self, names: tuple[str, ...]) -> list[Tensor]:
        out: list[Tensor] = []
        for name in names:
            out.extend(self.heads[name])
        return out

    def save(self, path) -> None:
        ad.save_params(path, {k: t.values for k, t in self.named().items()})

    def load(self, path) -> None:
        ad.load_params_into(path, self.named())


class FeatureScaler:
    """Running per-feature min/max; scales dense features into [0, 1]."""

    def __init__(self, n_user_dense: int, n_item_dense: int):
        self._mins = {
            USER: np.full(n_user_dense, np.inf),
            ITEM: np.full(n_item_dense, np.inf),
        }
        self._maxs = {
            USER: np.full(n_user_dense, -np.inf),
            ITEM: np.full(n_item_dense, -np.inf),
        }

    def update(self, dense, role: str) -> None:
        vals = np.asarray(dense, dtype=np.float64)
        if vals.shape != self._mins[role].shape:
            raise StructuralError(
                f"dense feature length {vals.shape} does not match schema "
                f"{self._mins[role].shape} for role {role!r}"
            )
        np.minimum(self._mins[role], vals, out=self._mins[role])
        np.maximum(self._maxs[role], vals, out=self._maxs[role])

    def transform(self, dense_matrix: np.ndarray, role: str) -> np.ndarray:
        mn, mx = self._mins[role], self._maxs[role]
        if dense_matrix.shape[1:] != mn.shape:
            raise StructuralError(
                f"dense feature width {dense_matrix.shape[1:]} does not match "
                f"schema {mn.shape} for role {role!r}"
            )
        span = mx - mn
        # features never observed (or constant so far) sit at the midpoint
        safe = np.where(span > 0, span, 1.0)
        base = np.where(np.isfinite(mn), mn, 0.0)
        scaled = (dense_matrix - base) / safe
        scaled = np.where(np.isfinite(mn) & (span > 0), scaled, 0.5)
        return np.clip(scaled, 0.0, 1.0)


@dataclass
class HeadOutputs:
    y_p: Tensor
    y_fn: Tensor
    y_cvr: Tensor


@dataclass
class ForwardInfo:
    n_nodes: int
    n_edges: int
    mean_filter_weight: float | None  # mean low-pass weight over sampled edges


def _oov_guard(ids: np.ndarray, vocab: int) -> np.ndarray:
    """Shift ids by one; anything outside [0, vocab) maps to reserved row 0."""
    shifted = ids + 1
    return np.where((ids >= 0) & (ids < vocab), shifted, 0).astype(np.intp)


def embed_nodes(params: ModelParams, scaler: FeatureScaler, nodes: list[SampledNode]) -> Tensor:
    """Initial embeddings for a mixed user/item node list, in node order."""
    cfg = params.config
    role_specs = {
        USER: (cfg.n_user_dense, params.user_tables, params.user_embed_w, params.user_embed_b),
        ITEM: (cfg.n_item_dense, params.item_tables, params.item_embed_w, params.item_embed_b),
    }
    parts: list[Tensor] = []
    perm = np.empty(len(nodes), dtype=np.intp)
    offset = 0
    for role in (USER, ITEM):
        pos = [i for i, n in enumerate(nodes) if n.key[0] == role]
        if not pos:
            continue
        n_dense, tables, w, b = role_specs[role]
        dense = np.array([nodes[i].attribute[0] for i in pos], dtype=np.float64)
        cats = np.array([nodes[i].attribute[1] for i in pos], dtype=np.int64)
        if dense.shape[1] != n_dense or cats.shape[1] != len(tables):
            raise StructuralError(
                f"attribute schema mismatch for role {role!r}: "
                f"got {dense.shape[1]} dense / {cats.shape[1]} categorical, "
                f"expected {n_dense} / {len(tables)}"
            )
        feats = [Tensor(scaler.transform(dense, role))]
        for f, table in enumerate(tables):
            feats.append(ad.embedding_lookup(table, _oov_guard(cats[:, f], table.shape[0] - 1)))
        x = ad.concat(feats, axis=1)
        parts.append(ad.add(ad.matmul(x, w), b))
        perm[pos] = offset + np.arange(len(pos))
        offset += len(pos)
    stacked = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
    if len(nodes) == stacked.shape[0] and np.array_equal(perm, np.arange(len(nodes))):
        return stacked
    return ad.embedding_lookup(stacked, perm)


def embed_node(params: ModelParams, scaler: FeatureScaler, node: SampledNode) -> Tensor:
    """Single-node convenience wrapper; returns a (d,) embedding."""
    return ad.reshape(embed_nodes(params, scaler, [node]), (-1,))


def _conve_scores(params: ModelParams, e_u: Tensor, e_i: Tensor) -> Tensor:
    cfg = params.config
    r = cfg.reshape_side
    n = e_u.shape[0]
    ru = ad.reshape(e_u, (n, r, r))
    ri = ad.reshape(e_i, (n, r, r))
    stacked = ad.concat([ru, ri], axis=1)  # (n, 2r, r)
    conv = ad.conv2d(stacked, params.conv_kernel, params.conv_bias)
    flat = ad.reshape(conv, (n, cfg.conv_flat_dim))
    return ad.reshape(ad.matmul(flat, params.conv_proj), (-1,))


def _linear_scores(params: ModelParams, e_u: Tensor, e_i: Tensor) -> Tensor:
    z = ad.concat([e_u, e_i], axis=1)
    hidden = ad.leaky_relu(ad.add(ad.matmul(z, params.pref_w1), params.pref_b1), params.config.leaky_slope)
    return ad.reshape(ad.add(ad.matmul(hidden, params.pref_w2), params.pref_b2), (-1,))


def compute_preference(params: ModelParams, e_u: Tensor, e_i: Tensor, positive: bool) -> Tensor:
    """Preference for one edge; positive edges are exactly 1 (no gradient)."""
    if positive:
        return Tensor(np.array(1.0))
    eu = ad.reshape(e_u, (1, -1))
    ei = ad.reshape(e_i, (1, -1))
    score = _conve_scores(params, eu, ei) if params.config.preference == "conve" else _linear_scores(params, eu, ei)
    return ad.reshape(ad.tanh(score), ())


def edge_preferences(params: ModelParams, h: Tensor, edges: list[SampledEdge]) -> Tensor:
    """Per-edge preferences as one (E,) tensor, positives pinned to 1."""
    n_edges = len(edges)
    if params.config.aggregator == "lowpass":
        return Tensor(np.ones(n_edges))
    unl = [j for j, e in enumerate(edges) if e.label is not Label.POSITIVE]
    if not unl:
        return Tensor(np.ones(n_edges))
    e_u = ad.embedding_lookup(h, np.array([edges[j].user_idx for j in unl], dtype=np.intp))
    e_i = ad.embedding_lookup(h, np.array([edges[j].item_idx for j in unl], dtype=np.intp))
    scores = _conve_scores(params, e_u, e_i) if params.config.preference == "conve" else _linear_scores(params, e_u, e_i)
    p_unl = ad.tanh(scores)
    if len(unl) == n_edges:
        return p_unl
    pos = [j for j, e in enumerate(edges) if e.label is Label.POSITIVE]
    combined = ad.concat([ad.reshape(p_unl, (-1, 1)), Tensor(np.ones((len(pos), 1)))], axis=0)
    perm = np.empty(n_edges, dtype=np.intp)
    perm[unl] = np.arange(len(unl))
    perm[pos] = len(unl) + np.arange(len(pos))
    return ad.reshape(ad.embedding_lookup(combined, perm), (-1,))


def hlgcn_layer(
    h_prev: Tensor,
    h0: Tensor,
    edges: list[SampledEdge],
    preferences: Tensor,
    degrees: np.ndarray,
    epsilon: float,
) -> Tensor:
    """One convolution: retained initial embedding plus preference-weighted,
    degree-normalized neighbor aggregation (both edge directions)."""
    n = h_prev.shape[0]
    base = ad.scale(h0, epsilon)
    if not edges:
        return base
    u_idx = np.array([e.user_idx for e in edges], dtype=np.intp)
    i_idx = np.array([e.item_idx for e in edges], dtype=np.intp)
    deg_prod = degrees[u_idx] * degrees[i_idx]
    if np.any(deg_prod <= 0):
        raise AssertionError("aggregated edge with zero-degree endpoint")
    coeff = ad.reshape(ad.mul(preferences, Tensor(1.0 / np.sqrt(deg_prod))), (-1, 1))
    msg_to_u = ad.mul(coeff, ad.embedding_lookup(h_prev, i_idx))
    msg_to_i = ad.mul(coeff, ad.embedding_lookup(h_prev, u_idx))
    agg = ad.add(ad.segment_sum(msg_to_u, u_idx, n), ad.segment_sum(msg_to_i, i_idx, n))
    return ad.add(base, agg)


def _head(params: ModelParams, name: str, z: Tensor) -> Tensor:
    w1, b1, w2, b2 = params.heads[name]
    hidden = ad.leaky_relu(ad.add(ad.matmul(z, w1), b1), params.config.leaky_slope)
    return ad.sigmoid(ad.reshape(ad.add(ad.matmul(hidden, w2), b2), (-1,)))


def forward_batch(
    params: ModelParams,
    scaler: FeatureScaler,
    samples: list[NeighborSample],
    k: int,
    aux_detached: bool = False,
) -> tuple[HeadOutputs, ForwardInfo]:
    """Run the model over a batch of neighbor samples (disjoint union graph).

    Each sample's seeds must be [user, item]. ``aux_detached`` stops the
    auxiliary heads' gradients at the trunk (separate-parameters wiring).
    """
    nodes: list[SampledNode] = []
    edges: list[SampledEdge] = []
    user_seed_idx = np.empty(len(samples), dtype=np.intp)
    item_seed_idx = np.empty(len(samples), dtype=np.intp)
    for b, sample in enumerate(samples):
        if len(sample.seed_indices) != 2:
            raise StructuralError("training sample must have [user, item] seeds")
        offset = len(nodes)
        nodes.extend(sample.nodes)
        for e in sample.edges:
            edges.append(SampledEdge(e.user_idx + offset, e.item_idx + offset, e.label, e.timestamp))
        user_seed_idx[b] = offset + sample.seed_indices[0]
        item_seed_idx[b] = offset + sample.seed_indices[1]

    degrees = np.array([n.degree for n in nodes], dtype=np.float64)
    h0 = embed_nodes(params, scaler, nodes)
    h = h0
    mean_weight = None
    for _ in range(k):
        p = edge_preferences(params, h, edges)
        if edges:
            mean_weight = float(np.mean((1.0 + p.values) / 2.0))
        h = hlgcn_layer(h, h0, edges, p, degrees, params.epsilon)

    z = ad.concat(
        [ad.embedding_lookup(h, user_seed_idx), ad.embedding_lookup(h, item_seed_idx)], axis=1
    )
    z_aux = ad.stop_gradient(z) if aux_detached else z
    outputs = HeadOutputs(
        y_p=_head(params, "p", z_aux),
        y_fn=_head(params, "fn", z_aux),
        y_cvr=_head(params, "cvr", z),
    )
    info = ForwardInfo(n_nodes=len(nodes), n_edges=len(edges), mean_filter_weight=mean_weight)
    return outputs, info


def forward(
    params: ModelParams,
    scaler: FeatureScaler,
    sample: NeighborSample,
    user_key,
    item_key,
    k: int,
    aux_detached: bool = False,
) -> HeadOutputs:
    """Single-sample forward; validates that the seeds match the sample."""
    seed_keys = [sample.nodes[i].key for i in sample.seed_indices]
    if seed_keys != [user_key, item_key]:
        raise StructuralError(f"sample seeds {seed_keys} != ({user_key}, {item_key})")
    outputs, _ = forward_batch(params, scaler, [sample], k, aux_detached=aux_detached)
    return outputs
