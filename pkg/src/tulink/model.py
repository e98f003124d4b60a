"""The trajectory-user linking network.

Two graph convolution encoders produce grid embeddings (local graph) and
trajectory/user embeddings (global graph). Each trajectory point is encoded
by fusing its time-window and motion-state embeddings with its grid
embedding; a stack of multi-head self-attention layers with sinusoidal
position encoding summarizes the sequence, max-pooled into the local
representation. The global representation is a sparsemax-weighted sum of
all trajectory embeddings scored by cosine similarity. Both halves
concatenate into an affine linking layer over users, trained with
softmax cross entropy plus L2 on the weight matrices.

Ablation switches zero out one component at a time: local branch, global
branch, self-attention stack (pass-through), sparsemax (softmax instead),
or the time/state encoders (zero sub-vectors).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .errors import ConfigError
from .graphs import GlobalSpatialGraph, LocalSpatialGraph, symmetric_normalize
from .mobility import GridSequence
from .tensor import Tensor

COSINE_EPS = 1e-12

ABLATION_FLAGS = (
    "disable_local",
    "disable_global",
    "disable_self_attention",
    "use_softmax_global",
    "disable_time_state",
)


@dataclass
class ModelConfig:
    embed_dim: int = 128
    gcn_layers: int = 2
    attn_layers: int = 3
    heads: int = 4
    lambda_l2: float = 5e-4
    dropout_rate: float = 0.5
    state_vocab: int = 9
    time_vocab: int = 12
    disable_local: bool = False
    disable_global: bool = False
    disable_self_attention: bool = False
    use_softmax_global: bool = False
    disable_time_state: bool = False
    binarize_adjacency: bool = False
    scale_full_d: bool = False

    def validate(self) -> None:
        if self.embed_dim <= 0 or self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must be a positive multiple of heads {self.heads}"
            )
        if self.gcn_layers < 1 or self.attn_layers < 1:
            raise ConfigError("gcn_layers and attn_layers must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.time_vocab < 1 or self.state_vocab < 1:
            raise ConfigError("vocabulary sizes must be positive")
        n_flags = sum(getattr(self, f) for f in ABLATION_FLAGS)
        if n_flags > 1:
            raise ConfigError("at most one ablation flag may be set")


def positional_encoding(max_len: int, d: int) -> np.ndarray:
    """Fixed sinusoidal position table: sin on even columns, cos on odd."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    even = np.arange(0, d, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, even / d)
    p = np.zeros((max_len, d))
    p[:, 0::2] = np.sin(angles)
    p[:, 1::2] = np.cos(angles[:, : d // 2])
    return p


def _xavier(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


class ModelParams:
    """All learnable tensors, plus the fixed position table.

    Tensors live in a single insertion-ordered dict so initialization,
    checkpoints and the optimizer all walk them in one deterministic order.
    """

    def __init__(
        self,
        config: ModelConfig,
        n_grids: int,
        n_users: int,
        max_seq_len: int,
        rng: np.random.Generator,
    ):
        config.validate()
        self.config = config
        self.n_grids = n_grids
        self.n_users = n_users
        self.max_seq_len = max_seq_len
        d = config.embed_dim
        dh = d // config.heads
        self.tensors: dict[str, Tensor] = {}

        def matrix(name, rows, cols):
            self.tensors[name] = Tensor(_xavier(rng, rows, cols), requires_grad=True)

        def vector(name, size, fill=0.0):
            self.tensors[name] = Tensor(np.full(size, fill), requires_grad=True)

        for i in range(config.gcn_layers):
            matrix(f"gcn_local_{i}", n_grids if i == 0 else d, d)
        for i in range(config.gcn_layers):
            matrix(f"gcn_global_{i}", n_grids if i == 0 else d, d)
        matrix("time_w", config.time_vocab, d)
        vector("time_b", d)
        matrix("state_w", config.state_vocab, d)
        vector("state_b", d)
        matrix("loc_w", 3 * d, d)
        vector("loc_b", d)
        for layer in range(config.attn_layers):
            for h in range(config.heads):
                matrix(f"attn{layer}_q{h}", d, dh)
                matrix(f"attn{layer}_k{h}", d, dh)
                matrix(f"attn{layer}_v{h}", d, dh)
            matrix(f"attn{layer}_out_w", d, d)
            vector(f"attn{layer}_out_b", d)
            vector(f"attn{layer}_ln_gain", d, fill=1.0)
            vector(f"attn{layer}_ln_bias", d)
        matrix("link_w", n_users, 2 * d)
        vector("link_b", n_users)

        self.pos_encoding = positional_encoding(max(max_seq_len, 1), d)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def active_names(self, config: ModelConfig | None = None) -> list[str]:
        """Names of parameters reachable by the forward pass under config."""
        cfg = config or self.config
        names: list[str] = []
        if not cfg.disable_local:
            names += [f"gcn_local_{i}" for i in range(cfg.gcn_layers)]
            if not cfg.disable_time_state:
                names += ["time_w", "time_b", "state_w", "state_b"]
            names += ["loc_w", "loc_b"]
            if not cfg.disable_self_attention:
                for layer in range(cfg.attn_layers):
                    for h in range(cfg.heads):
                        names += [f"attn{layer}_q{h}", f"attn{layer}_k{h}", f"attn{layer}_v{h}"]
                    names += [
                        f"attn{layer}_out_w",
                        f"attn{layer}_out_b",
                        f"attn{layer}_ln_gain",
                        f"attn{layer}_ln_bias",
                    ]
        if not cfg.disable_global:
            names += [f"gcn_global_{i}" for i in range(cfg.gcn_layers)]
        names += ["link_w", "link_b"]
        return names

    def active_parameter_count(self, config: ModelConfig | None = None) -> int:
        return sum(self.tensors[n].values.size for n in self.active_names(config))

    def l2_tensors(self, config: ModelConfig | None = None) -> list[Tensor]:
        """Active weight matrices; biases, layer-norm affines and the fixed
        position table never enter the regularizer."""
        return [
            self.tensors[n]
            for n in self.active_names(config)
            if self.tensors[n].values.ndim == 2
        ]

    def values_dict(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.tensors.items():
            if name not in values:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            if values[name].shape != t.values.shape:
                raise ValueError(
                    f"checkpoint shape {values[name].shape} for {name!r} "
                    f"does not match model shape {t.values.shape}"
                )
            t.values = values[name].astype(np.float64).copy()
            if t.grad is not None:
                t.grad = np.zeros_like(t.values)


@dataclass
class ModelInputs:
    """Everything the forward pass consumes, prepared once per run."""

    m_local: sp.csr_matrix
    x_local: sp.csr_matrix
    m_global: sp.csr_matrix
    x_global: sp.csr_matrix
    traj_ids: list[str]
    grid_idx: list[np.ndarray]
    state_idx: list[np.ndarray]
    time_idx: list[np.ndarray]
    labels: np.ndarray
    user_ids: list[str]
    n_grids: int
    max_seq_len: int
    traj_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.traj_index:
            self.traj_index = {tid: i for i, tid in enumerate(self.traj_ids)}

    @property
    def n_traj(self) -> int:
        return len(self.traj_ids)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    def indices_for(self, traj_ids: Sequence[str]) -> np.ndarray:
        return np.asarray([self.traj_index[t] for t in traj_ids], dtype=np.int64)


def build_model_inputs(
    sequences: Sequence[GridSequence],
    local_graph: LocalSpatialGraph,
    global_graph: GlobalSpatialGraph,
    config: ModelConfig,
) -> ModelInputs:
    """Normalize adjacencies and index every sequence against the rosters."""
    ids = [s.traj_id for s in sequences]
    if ids != list(global_graph.traj_ids):
        raise ValueError("sequence order does not match the global graph roster")
    user_index = {u: k for k, u in enumerate(global_graph.user_ids)}
    labels = np.asarray([user_index[s.user_id] for s in sequences], dtype=np.int64)

    def prepare(adj):
        if config.binarize_adjacency:
            adj = (adj > 0).astype(np.int64)
        return symmetric_normalize(adj)

    return ModelInputs(
        m_local=prepare(local_graph.adjacency),
        x_local=local_graph.features.astype(np.float64).tocsr(),
        m_global=prepare(global_graph.adjacency),
        x_global=global_graph.features.astype(np.float64).tocsr(),
        traj_ids=ids,
        grid_idx=[np.asarray(s.grid, dtype=np.int64) for s in sequences],
        state_idx=[np.asarray(s.state, dtype=np.int64) for s in sequences],
        time_idx=[np.asarray(s.window, dtype=np.int64) for s in sequences],
        labels=labels,
        user_ids=list(global_graph.user_ids),
        n_grids=local_graph.n_grids,
        max_seq_len=max(len(s) for s in sequences),
    )


def gcn_forward(m_norm: sp.csr_matrix, features: sp.csr_matrix, weights: Sequence[Tensor]) -> Tensor:
    """Stacked propagation H <- ReLU(M (H W)) starting from sparse features."""
    if features.shape[1] != weights[0].shape[0]:
        raise ValueError(
            f"feature width {features.shape[1]} does not match first weight "
            f"rows {weights[0].shape[0]}"
        )
    h: Tensor | None = None
    for i, w in enumerate(weights):
        hw = T.spmm(features, w) if i == 0 else T.matmul(h, w)
        h = T.relu(T.spmm(m_norm, hw))
    return h


def encode_locations(
    params: ModelParams,
    config: ModelConfig,
    h_local: Tensor,
    grid_idx: np.ndarray,
    state_idx: np.ndarray,
    time_idx: np.ndarray,
) -> Tensor:
    """Per-point fusion Tanh(FC([time ; state ; grid])) -> (m, d)."""
    d = config.embed_dim
    g_emb = T.embedding(h_local, grid_idx)
    if config.disable_time_state:
        zeros = Tensor(np.zeros((len(grid_idx), d)))
        t_emb, s_emb = zeros, zeros
    else:
        t_emb = T.add_bias(T.embedding(params["time_w"], time_idx), params["time_b"])
        s_emb = T.add_bias(T.embedding(params["state_w"], state_idx), params["state_b"])
    fused = T.concat([t_emb, s_emb, g_emb], axis=-1)
    return T.tanh(T.add_bias(T.matmul(fused, params["loc_w"]), params["loc_b"]))


def self_attention_stack(
    params: ModelParams,
    config: ModelConfig,
    x: Tensor,
    rng: np.random.Generator,
    training: bool,
) -> Tensor:
    """Position-encoded multi-head self-attention with post-norm residuals."""
    m = x.shape[0]
    if m == 0:
        raise ValueError("cannot attend over an empty sequence")
    dh = config.embed_dim // config.heads
    inv_scale = 1.0 / math.sqrt(config.embed_dim if config.scale_full_d else dh)
    state = T.add(x, Tensor(params.pos_encoding[:m]))
    for layer in range(config.attn_layers):
        heads = []
        for h in range(config.heads):
            q = T.matmul(state, params[f"attn{layer}_q{h}"])
            k = T.matmul(state, params[f"attn{layer}_k{h}"])
            v = T.matmul(state, params[f"attn{layer}_v{h}"])
            weights = T.softmax(T.scale(T.matmul(q, T.transpose(k)), inv_scale), axis=-1)
            heads.append(T.matmul(weights, v))
        z = T.add_bias(T.matmul(T.concat(heads, axis=-1), params[f"attn{layer}_out_w"]),
                       params[f"attn{layer}_out_b"])
        z = T.dropout(z, config.dropout_rate, training, rng)
        state = T.layer_norm(T.add(state, z),
                             params[f"attn{layer}_ln_gain"],
                             params[f"attn{layer}_ln_bias"])
    return state


def global_attention(
    h_traj: Tensor,
    traj_norms: Tensor,
    index: int,
    use_softmax: bool,
) -> Tensor:
    """Cosine-scored attention over every trajectory embedding.

    Scores are normalized with sparsemax so irrelevant trajectories receive
    exactly zero weight (softmax under the corresponding ablation); the
    output is the weighted sum of trajectory embeddings.
    """
    n_traj, d = h_traj.shape
    hi = T.slice_rows(h_traj, index, index + 1)
    dots = T.reshape(T.matmul(h_traj, T.transpose(hi)), (n_traj,))
    denom = T.add_scalar(T.scale_by(traj_norms, T.row_norms(hi)), COSINE_EPS)
    scores = T.div(dots, denom)
    weights = T.softmax(scores) if use_softmax else T.sparsemax(scores)
    return T.reshape(T.matmul(T.reshape(weights, (1, n_traj)), h_traj), (d,))


def fused_representations(
    params: ModelParams,
    config: ModelConfig,
    inputs: ModelInputs,
    batch: np.ndarray,
    rng: np.random.Generator,
    training: bool,
) -> Tensor:
    """Concatenated [local ; global] vectors, one row per batched trajectory."""
    d = config.embed_dim
    zeros_d = Tensor(np.zeros(d))

    h_local = None
    if not config.disable_local:
        h_local = gcn_forward(
            inputs.m_local, inputs.x_local,
            [params[f"gcn_local_{i}"] for i in range(config.gcn_layers)],
        )
    h_traj = traj_norms = None
    if not config.disable_global:
        h_global = gcn_forward(
            inputs.m_global, inputs.x_global,
            [params[f"gcn_global_{i}"] for i in range(config.gcn_layers)],
        )
        h_traj = T.slice_rows(h_global, 0, inputs.n_traj)
        traj_norms = T.row_norms(h_traj)

    fused = []
    for idx in batch:
        idx = int(idx)
        if config.disable_local:
            z_local = zeros_d
        else:
            x = encode_locations(
                params, config, h_local,
                inputs.grid_idx[idx], inputs.state_idx[idx], inputs.time_idx[idx],
            )
            x = T.dropout(x, config.dropout_rate, training, rng)
            z = x if config.disable_self_attention else self_attention_stack(
                params, config, x, rng, training
            )
            z_local = T.max_pool_positions(z)
        if config.disable_global:
            z_global = zeros_d
        else:
            z_global = global_attention(h_traj, traj_norms, idx, config.use_softmax_global)
        fused.append(T.concat([z_local, z_global], axis=-1))

    return T.stack_rows(fused)


def forward_batch(
    params: ModelParams,
    config: ModelConfig,
    inputs: ModelInputs,
    batch: np.ndarray,
    rng: np.random.Generator,
    training: bool,
) -> Tensor:
    """Logits over users for a batch of trajectory roster indices."""
    stacked = fused_representations(params, config, inputs, batch, rng, training)
    return T.add_bias(T.matmul(stacked, T.transpose(params["link_w"])), params["link_b"])


def model_loss(logits: Tensor, targets: np.ndarray, params: ModelParams,
               config: ModelConfig) -> Tensor:
    """Batch-mean cross entropy plus (lambda/2) * sum of squared weights."""
    ce = T.cross_entropy(logits, targets)
    if config.lambda_l2 == 0.0:
        return ce
    penalty = None
    for t in params.l2_tensors(config):
        term = T.sum_squares(t)
        penalty = term if penalty is None else T.add(penalty, term)
    return T.add(ce, T.scale(penalty, 0.5 * config.lambda_l2))
