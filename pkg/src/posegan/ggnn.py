"""Gated graph propagation over a skeleton: neighbor messages + GRU update.

Node states live in a plain ``(N, d)`` tensor (one hidden row per joint);
a batched ``(B, N, d)`` layout is accepted everywhere and is equivalent to
looping over samples. One propagation step collects each node's messages
as the sum of linearly transformed neighbor states and then applies a GRU
cell, with all weights shared across nodes and steps:

    j_n = sum over neighbors n' of W_msg @ i_n'
    z = sigmoid(W_z j + U_z i + b_z)
    r = sigmoid(W_r j + U_r i + b_r)
    h = tanh(W_h j + U_h (r * i) + b_h)
    i' = (1 - z) * i + z * h

Messages carry no bias; biases enter only the GRU pre-activations. An
optional per-direction message mode uses two matrices, selected by the
traversal direction of each stored undirected edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .skeleton import SkeletonGraph

__all__ = ["GgnnParams", "collect_messages", "gru_update", "propagate", "adjacency_matrix"]


@dataclass
class GgnnParams:
    """Shared GGNN weights: message matrices plus GRU gates; all d x d."""

    w_msg: tuple          # one matrix, or two in per-direction mode
    w_z: Tensor
    u_z: Tensor
    w_r: Tensor
    u_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_z: Tensor | None = None
    b_r: Tensor | None = None
    b_h: Tensor | None = None

    @property
    def dim(self) -> int:
        return self.w_z.shape[0]

    @property
    def directional(self) -> bool:
        return len(self.w_msg) == 2

    @classmethod
    def init(
        cls,
        dim: int,
        rng: np.random.Generator,
        bias: bool = True,
        directional: bool = False,
    ) -> "GgnnParams":
        def w():
            return ad.uniform_fan_in(rng, (dim, dim))

        msg = (w(), w()) if directional else (w(),)
        zb = (lambda: Tensor(np.zeros(dim), track_grad=True)) if bias else (lambda: None)
        return cls(msg, w(), w(), w(), w(), w(), w(), zb(), zb(), zb())

    def named(self, prefix: str = "ggnn") -> dict:
        out = {}
        for i, m in enumerate(self.w_msg):
            out[f"{prefix}.w_msg.{i}"] = m
        for key in ("w_z", "u_z", "w_r", "u_r", "w_h", "u_h", "b_z", "b_r", "b_h"):
            t = getattr(self, key)
            if t is not None:
                out[f"{prefix}.{key}"] = t
        return out

    def tensors(self) -> list:
        return list(self.named().values())


def adjacency_matrix(g: SkeletonGraph) -> np.ndarray:
    a = np.zeros((g.n_nodes, g.n_nodes))
    for i, j in g.edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    return a


def _directed_adjacency(g: SkeletonGraph):
    """Receiver-by-sender matrices for the two traversal directions.

    Direction 0 carries messages along each stored edge (a, b) from a to b;
    direction 1 carries them from b back to a.
    """
    fwd = np.zeros((g.n_nodes, g.n_nodes))
    bwd = np.zeros((g.n_nodes, g.n_nodes))
    for a, b in g.edges:
        fwd[b, a] = 1.0
        bwd[a, b] = 1.0
    return fwd, bwd


def _check_states(states: Tensor, g: SkeletonGraph, dim: int) -> bool:
    shape = states.shape
    if len(shape) == 2:
        batched = False
        n, d = shape
    elif len(shape) == 3:
        batched = True
        _, n, d = shape
    else:
        raise ValueError(f"node states must be (N,d) or (B,N,d), got {shape}")
    if n != g.n_nodes:
        raise ValueError(f"states have {n} nodes but the graph has {g.n_nodes}")
    if d != dim:
        raise ValueError(f"states have hidden dim {d} but parameters expect {dim}")
    return batched


def _aggregate(adj: np.ndarray, msg: Tensor, batched: bool) -> Tensor:
    """Per-node neighbor sums: adj (N,N) applied to msg rows."""
    a = Tensor(adj)
    if not batched:
        return ad.matmul(a, msg)
    b, n, d = msg.shape
    flat = ad.reshape(ad.transpose(msg, (1, 0, 2)), (n, b * d))
    out = ad.matmul(a, flat)
    return ad.transpose(ad.reshape(out, (n, b, d)), (1, 0, 2))


def _rowwise(x: Tensor, w: Tensor, batched: bool) -> Tensor:
    """Apply W to every state row: x @ W^T, flattening any batch axis."""
    if not batched:
        return ad.matmul(x, ad.transpose(w))
    b, n, d = x.shape
    flat = ad.reshape(x, (b * n, d))
    return ad.reshape(ad.matmul(flat, ad.transpose(w)), (b, n, d))


def collect_messages(g: SkeletonGraph, states: Tensor, params: GgnnParams) -> Tensor:
    """Summed transformed neighbor states, per node: j_n = sum W i_n'."""
    batched = _check_states(states, g, params.dim)
    if not params.directional:
        return _aggregate(adjacency_matrix(g), _rowwise(states, params.w_msg[0], batched), batched)
    fwd, bwd = _directed_adjacency(g)
    a = _aggregate(fwd, _rowwise(states, params.w_msg[0], batched), batched)
    b = _aggregate(bwd, _rowwise(states, params.w_msg[1], batched), batched)
    return ad.add(a, b)


def _gate(x: Tensor, w: Tensor, s: Tensor, u: Tensor, bias, batched: bool) -> Tensor:
    pre = ad.add(_rowwise(x, w, batched), _rowwise(s, u, batched))
    if bias is not None:
        if batched:
            b_, n, d = pre.shape
            pre = ad.reshape(ad.add_rowvec(ad.reshape(pre, (b_ * n, d)), bias), (b_, n, d))
        else:
            pre = ad.add_rowvec(pre, bias)
    return pre


def gru_update(states: Tensor, messages: Tensor, params: GgnnParams, graph_nodes: int | None = None) -> Tensor:
    """One GRU cell applied independently to every node's state row."""
    if states.shape != messages.shape:
        raise ValueError(f"states {states.shape} and messages {messages.shape} disagree")
    batched = len(states.shape) == 3
    if states.shape[-1] != params.dim:
        raise ValueError(f"hidden dim {states.shape[-1]} does not match parameters ({params.dim})")
    z = ad.sigmoid(_gate(messages, params.w_z, states, params.u_z, params.b_z, batched))
    r = ad.sigmoid(_gate(messages, params.w_r, states, params.u_r, params.b_r, batched))
    h = ad.tanh(_gate(messages, params.w_h, ad.mul(r, states), params.u_h, params.b_h, batched))
    one_minus_z = ad.add(ad.neg(z), 1.0)
    return ad.add(ad.mul(one_minus_z, states), ad.mul(z, h))


def propagate(g: SkeletonGraph, states: Tensor, params: GgnnParams, steps: int) -> Tensor:
    """Unroll ``steps`` rounds of message collection + GRU update."""
    if steps < 0:
        raise ValueError("propagate: steps must be >= 0")
    _check_states(states, g, params.dim)
    for _ in range(steps):
        states = gru_update(states, collect_messages(g, states, params), params)
    return states
