"""Actor and critic networks.

The actor maps a delay-history state ``(N, K+1, T+1)`` to ``N`` node scores:

    STRL: flatten each time slice -> project to F -> GRU -> temporal attention
          -> project to N x K node features -> GAT -> MLP head
    SRL:  latest time slice -> project to N x K -> GAT -> MLP head
    TRL:  STRL without the GAT layer

All weights are stored ``(out, in)`` and applied as ``x @ W.T``.  Every
parameter is initialised from its own generator seeded by
``derive_seed(master_seed, name)``, so variants built from the same seed share
identical values for the parameters they have in common.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .tensor import DTYPE, ShapeError


class ConfigurationError(ValueError):
    pass


class DegenerateNeighborhoodError(ValueError):
    pass


class Variant(str, enum.Enum):
    STRL = "STRL"
    SRL = "SRL"
    TRL = "TRL"

    @property
    def temporal(self) -> bool:
        return self is not Variant.SRL

    @property
    def spatial(self) -> bool:
        return self is not Variant.TRL


def _weight(shape, seed: int, name: str, zero: bool = False) -> nn.Parameter:
    if zero:
        return nn.Parameter(torch.zeros(shape, dtype=DTYPE))
    return nn.Parameter(T.xavier_uniform(tuple(shape), T.derive_seed(seed, name)))


class Gru(nn.Module):
    """Gated recurrent unit.

    z = sigmoid(x Wz' + h Uz'),  r = sigmoid(x Wr' + h Ur')
    h~ = tanh(x W' + r * (h U') + b),  h <- z * h + (1 - z) * h~
    """

    def __init__(self, input_dim: int, hidden_dim: int, seed: int = 0, prefix: str = "gru"):
        super().__init__()
        F, d = input_dim, hidden_dim
        self.input_dim, self.hidden_dim = F, d
        self.W_z = _weight((d, F), seed, f"{prefix}.W_z")
        self.U_z = _weight((d, d), seed, f"{prefix}.U_z")
        self.W_r = _weight((d, F), seed, f"{prefix}.W_r")
        self.U_r = _weight((d, d), seed, f"{prefix}.U_r")
        self.W = _weight((d, F), seed, f"{prefix}.W")
        self.U = _weight((d, d), seed, f"{prefix}.U")
        self.b = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, X: torch.Tensor, h0: torch.Tensor | None = None, return_gates: bool = False):
        """``X`` is ``(..., S, F)``; returns hidden states ``(..., S, d)``."""
        if X.shape[-1] != self.input_dim:
            raise ShapeError(f"gru: input feature dim {X.shape[-1]} != {self.input_dim}")
        lead = X.shape[:-2]
        h = torch.zeros(*lead, self.hidden_dim, dtype=X.dtype) if h0 is None else h0
        if h.shape[-1] != self.hidden_dim:
            raise ShapeError(f"gru: h0 dim {h.shape[-1]} != {self.hidden_dim}")
        hs, zs, rs = [], [], []
        for t in range(X.shape[-2]):
            x = X[..., t, :]
            z = T.sigmoid(x @ self.W_z.T + h @ self.U_z.T)
            r = T.sigmoid(x @ self.W_r.T + h @ self.U_r.T)
            cand = T.tanh(x @ self.W.T + r * (h @ self.U.T) + self.b)
            h = z * h + (1.0 - z) * cand
            hs.append(h)
            zs.append(z)
            rs.append(r)
        H = torch.stack(hs, dim=-2)
        if return_gates:
            return H, torch.stack(zs, dim=-2), torch.stack(rs, dim=-2)
        return H


def gru_forward(X: torch.Tensor, params: Gru, h0: torch.Tensor | None = None) -> torch.Tensor:
    return params(X, h0)


class TemporalAttention(nn.Module):
    """Causal query-key attention over a hidden-state sequence.

    Weights ``alpha[i, j] = softmax_j(q_i . k_j)`` for ``j <= i`` and exactly
    zero for ``j > i``.  Output is ``(H * context) @ W_A.T``, which needs the
    value dimension to equal the hidden dimension.
    """

    def __init__(self, hidden_dim: int, d_q: int, d_k: int, d_v: int, d_out: int,
                 seed: int = 0, prefix: str = "attn"):
        super().__init__()
        if d_q != d_k:
            raise ConfigurationError(f"query dim {d_q} must equal key dim {d_k}")
        if d_v != hidden_dim:
            raise ConfigurationError(f"value dim {d_v} must equal hidden dim {hidden_dim}")
        self.W_Q = _weight((d_q, hidden_dim), seed, f"{prefix}.W_Q")
        self.W_K = _weight((d_k, hidden_dim), seed, f"{prefix}.W_K")
        self.W_V = _weight((d_v, hidden_dim), seed, f"{prefix}.W_V")
        self.W_A = _weight((d_out, hidden_dim), seed, f"{prefix}.W_A")

    def forward(self, H: torch.Tensor, return_weights: bool = False):
        S = H.shape[-2]
        Q, K, V = H @ self.W_Q.T, H @ self.W_K.T, H @ self.W_V.T
        logits = Q @ K.transpose(-1, -2)
        causal = torch.ones(S, S, dtype=torch.bool).tril()
        alpha = T.softmax_rows(logits, causal)
        context = alpha @ V
        out = T.hadamard(H, context) @ self.W_A.T
        return (out, alpha) if return_weights else out


def temporal_attention(H: torch.Tensor, params: TemporalAttention):
    return params(H, return_weights=True)


def reshape_to_nodes(HA: torch.Tensor, projection: torch.Tensor, n_nodes: int, channels: int) -> torch.Tensor:
    """Flatten ``(..., S, d')`` and project linearly to ``(..., N, K)`` (row-major)."""
    flat = HA.reshape(*HA.shape[:-2], -1)
    if projection.shape != (n_nodes * channels, flat.shape[-1]):
        raise ShapeError(f"reshape_to_nodes: projection {tuple(projection.shape)} vs "
                         f"({n_nodes * channels}, {flat.shape[-1]})")
    return (flat @ projection.T).reshape(*flat.shape[:-1], n_nodes, channels)


class Gat(nn.Module):
    """Single-head graph attention layer with ELU output."""

    def __init__(self, in_channels: int, out_channels: int, slope: float = 0.2,
                 seed: int = 0, prefix: str = "gat", self_loops: bool = True):
        super().__init__()
        self.W = _weight((out_channels, in_channels), seed, f"{prefix}.W")
        self.a = nn.Parameter(T.xavier_uniform((2 * out_channels, 1), T.derive_seed(seed, f"{prefix}.a")).view(-1))
        self.slope = slope
        self.self_loops = self_loops

    def attended(self, adjacency: torch.Tensor) -> torch.Tensor:
        mask = adjacency.to(torch.bool)
        if self.self_loops:
            mask = mask | torch.eye(mask.shape[0], dtype=torch.bool)
        return mask

    def forward(self, x: torch.Tensor, adjacency: torch.Tensor, return_weights: bool = False):
        n = adjacency.shape[0]
        if x.shape[-2] != n or x.shape[-1] != self.W.shape[1]:
            raise ShapeError(f"gat: features {tuple(x.shape)} vs N={n}, K={self.W.shape[1]}")
        mask = self.attended(adjacency)
        if not bool(mask.any(dim=-1).all()):
            isolated = [i for i in range(n) if not bool(mask[i].any())]
            raise DegenerateNeighborhoodError(f"nodes {isolated} have nothing to attend to")
        z = x @ self.W.T
        k = z.shape[-1]
        src = z @ self.a[:k]
        dst = z @ self.a[k:]
        e = T.leaky_relu(src.unsqueeze(-1) + dst.unsqueeze(-2), self.slope)
        alpha = T.softmax_rows(e, mask)
        out = T.elu(alpha @ z)
        return (out, alpha) if return_weights else out


def gat_forward(x: torch.Tensor, adjacency: torch.Tensor, params: Gat):
    return params(x, adjacency, return_weights=True)


class MlpHead(nn.Module):
    """[linear -> layer norm -> leaky ReLU -> dropout] x layers -> linear."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, dropout: float = 0.5,
                 layers: int = 2, slope: float = 0.01, seed: int = 0, prefix: str = "head"):
        super().__init__()
        self.dropout = dropout
        self.slope = slope
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.gains = nn.ParameterList()
        self.shifts = nn.ParameterList()
        dims = [in_dim] + [hidden] * layers
        for i in range(layers):
            self.weights.append(_weight((dims[i + 1], dims[i]), seed, f"{prefix}.{i}.weight"))
            self.biases.append(nn.Parameter(torch.zeros(dims[i + 1], dtype=DTYPE)))
            self.gains.append(nn.Parameter(torch.ones(dims[i + 1], dtype=DTYPE)))
            self.shifts.append(nn.Parameter(torch.zeros(dims[i + 1], dtype=DTYPE)))
        self.out_weight = _weight((out_dim, dims[-1]), seed, f"{prefix}.out.weight")
        self.out_bias = nn.Parameter(torch.zeros(out_dim, dtype=DTYPE))

    def forward(self, x: torch.Tensor, train: bool = False, generator: torch.Generator | None = None):
        for W, b, g, s in zip(self.weights, self.biases, self.gains, self.shifts):
            x = T.layer_norm(x @ W.T + b) * g + s
            x = T.dropout(T.leaky_relu(x, self.slope), self.dropout, generator, train)
        return x @ self.out_weight.T + self.out_bias


@dataclass(frozen=True)
class ActorDims:
    """Dimension hyperparameters of the actor.

    ``n_nodes`` and ``max_degree`` come from the topology; ``window`` is T, the
    state carries ``window + 1`` time slices.
    """

    n_nodes: int
    max_degree: int
    window: int = 40
    features: int = 5
    hidden: int = 95
    d_q: int = 95
    d_k: int = 95
    d_v: int = 95
    d_out: int = 95
    gat_in: int = 5
    gat_out: int = 5
    mlp_hidden: int = 512
    mlp_layers: int = 2
    dropout: float = 0.5
    gat_slope: float = 0.2
    mlp_slope: float = 0.01

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return (self.n_nodes, self.max_degree + 1, self.window + 1)


def state_features(state: torch.Tensor) -> torch.Tensor:
    """Delays span orders of magnitude under congestion; compress with log1p."""
    return torch.log1p(state)


class Actor(nn.Module):
    def __init__(self, dims: ActorDims, variant: Variant | str = Variant.STRL, seed: int = 0):
        super().__init__()
        self.dims = dims
        self.variant = Variant(variant)
        self.seed = seed
        N, Kst, S = dims.state_shape
        if self.variant.temporal:
            self.input_proj = _weight((dims.features, N * Kst), seed, "input_proj")
            self.gru = Gru(dims.features, dims.hidden, seed)
            self.attn = TemporalAttention(dims.hidden, dims.d_q, dims.d_k, dims.d_v, dims.d_out, seed)
            self.reshape_proj = _weight((N * dims.gat_in, S * dims.d_out), seed, "reshape_proj")
        else:
            self.node_proj = _weight((N * dims.gat_in, N * Kst), seed, "node_proj")
        if self.variant.spatial:
            self.gat = Gat(dims.gat_in, dims.gat_out, dims.gat_slope, seed)
            head_in = N * dims.gat_out
        else:
            head_in = N * dims.gat_in
        self.head = MlpHead(head_in, dims.mlp_hidden, N, dims.dropout, dims.mlp_layers,
                            dims.mlp_slope, seed)
        self.register_buffer("adjacency", torch.zeros(N, N, dtype=torch.int8))

    def set_adjacency(self, adjacency) -> None:
        adj = torch.as_tensor(np.array(adjacency, dtype=np.int8))
        if adj.shape != self.adjacency.shape:
            raise ShapeError(f"adjacency {tuple(adj.shape)} vs {tuple(self.adjacency.shape)}")
        self.adjacency.copy_(adj)

    def hidden_states(self, state: torch.Tensor) -> torch.Tensor:
        """GRU hidden sequence ``(..., T+1, d)`` for a state ``(..., N, K+1, T+1)``."""
        x = state_features(state)
        seq = x.movedim(-1, -3).reshape(*x.shape[:-3], x.shape[-1], -1)
        return self.gru(seq @ self.input_proj.T)

    def node_features(self, state: torch.Tensor) -> torch.Tensor:
        N = self.dims.n_nodes
        if self.variant.temporal:
            HA = self.attn(self.hidden_states(state))
            return reshape_to_nodes(HA, self.reshape_proj, N, self.dims.gat_in)
        latest = state_features(state[..., -1]).reshape(*state.shape[:-3], -1)
        return (latest @ self.node_proj.T).reshape(*latest.shape[:-1], N, self.dims.gat_in)

    def forward(self, state: torch.Tensor, train: bool = False,
                generator: torch.Generator | None = None) -> torch.Tensor:
        if tuple(state.shape[-3:]) != self.dims.state_shape:
            raise ShapeError(f"actor: state {tuple(state.shape)} vs {self.dims.state_shape}")
        x = self.node_features(state)
        if self.variant.spatial:
            x = self.gat(x, self.adjacency)
        return self.head(x.reshape(*x.shape[:-2], -1), train, generator)

    def manifest(self) -> dict:
        return {"variant": self.variant.value, "seed": self.seed, "dims": asdict(self.dims)}


def actor_forward(state, actor: Actor, train: bool = False, generator=None) -> torch.Tensor:
    return actor(state, train, generator)


class Critic(nn.Module):
    """Q(s, a): MLP over the flattened log-delay state concatenated with the action."""

    def __init__(self, state_shape: tuple[int, int, int], n_actions: int, hidden: int = 512,
                 seed: int = 0, zero_final: bool = False, slope: float = 0.01):
        super().__init__()
        self.state_shape = tuple(state_shape)
        self.slope = slope
        in_dim = self.state_shape[0] * self.state_shape[1] * self.state_shape[2] + n_actions
        self.n_actions = n_actions
        self.W1 = _weight((hidden, in_dim), seed, "critic.W1")
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=DTYPE))
        self.W2 = _weight((hidden, hidden), seed, "critic.W2")
        self.b2 = nn.Parameter(torch.zeros(hidden, dtype=DTYPE))
        self.W3 = _weight((1, hidden), seed, "critic.W3", zero=zero_final)
        self.b3 = nn.Parameter(torch.zeros(1, dtype=DTYPE))

    def forward(self, state: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        if tuple(state.shape[-3:]) != self.state_shape or action.shape[-1] != self.n_actions:
            raise ShapeError(f"critic: state {tuple(state.shape)}, action {tuple(action.shape)}")
        s = state_features(state).reshape(*state.shape[:-3], -1)
        x = torch.cat([s, action], dim=-1)
        x = T.leaky_relu(x @ self.W1.T + self.b1, self.slope)
        x = T.leaky_relu(x @ self.W2.T + self.b2, self.slope)
        return (x @ self.W3.T + self.b3).squeeze(-1)


def critic_forward(state, action, critic: Critic) -> torch.Tensor:
    return critic(state, action)
