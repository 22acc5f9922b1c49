"""Tree-structured joint graphs for message passing and flip handling.

A skeleton is an undirected tree over body joints: edges carry messages in
both directions, and left/right joint pairs drive horizontal-flip handling
in augmentation and flip-test evaluation. The two built-in skeletons fix a
standard kinematic tree; custom skeletons can be supplied through the
dataset annotation file.
"""

from __future__ import annotations

from dataclasses import dataclass, field

__all__ = ["SkeletonGraph", "mpii_16", "lsp_14", "neighbors", "validate_tree"]


@dataclass(frozen=True)
class SkeletonGraph:
    """Immutable joint tree: nodes, undirected edges, names, flip pairs."""

    n_nodes: int
    edges: tuple
    names: tuple
    flip_pairs: tuple
    _adj: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adj = [[] for _ in range(self.n_nodes)]
        for a, b in self.edges:
            if not (0 <= a < self.n_nodes and 0 <= b < self.n_nodes):
                raise ValueError(f"edge ({a},{b}) out of range for {self.n_nodes} nodes")
            adj[a].append(b)
            adj[b].append(a)
        object.__setattr__(self, "_adj", tuple(tuple(sorted(n)) for n in adj))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def flip_map(self) -> list:
        """Per-node flipped index (identity for unpaired nodes)."""
        m = list(range(self.n_nodes))
        for a, b in self.flip_pairs:
            m[a], m[b] = b, a
        return m


def neighbors(g: SkeletonGraph, n: int) -> tuple:
    """Indices adjacent to node ``n``; symmetric by construction."""
    if not (0 <= n < g.n_nodes):
        raise ValueError(f"node {n} out of range for {g.n_nodes} nodes")
    return g._adj[n]


def validate_tree(g: SkeletonGraph) -> bool:
    """True iff the graph is a tree: connected, acyclic, no self/dup edges."""
    if len(g.edges) != g.n_nodes - 1:
        return False
    seen = set()
    for a, b in g.edges:
        if a == b:
            return False
        key = (min(a, b), max(a, b))
        if key in seen:
            return False
        seen.add(key)
    # |E| = |V|-1 with no duplicates: connectivity implies acyclicity.
    reached = {0}
    frontier = [0]
    while frontier:
        node = frontier.pop()
        for m in g._adj[node]:
            if m not in reached:
                reached.add(m)
                frontier.append(m)
    return len(reached) == g.n_nodes


_MPII_NAMES = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "pelvis", "thorax", "upper_neck", "head_top",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
)

_MPII_EDGES = (
    (0, 1), (1, 2), (2, 6),          # right leg into pelvis
    (5, 4), (4, 3), (3, 6),          # left leg into pelvis
    (6, 7), (7, 8), (8, 9),          # spine: pelvis-thorax-neck-head
    (7, 12), (12, 11), (11, 10),     # right arm off the thorax
    (7, 13), (13, 14), (14, 15),     # left arm off the thorax
)

_MPII_FLIP = ((0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13))

_LSP_NAMES = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
    "neck", "head_top",
)

_LSP_EDGES = (
    (0, 1), (1, 2), (2, 12),         # right leg, hip linked to neck
    (5, 4), (4, 3), (3, 12),         # left leg
    (6, 7), (7, 8), (8, 12),         # right arm into neck
    (11, 10), (10, 9), (9, 12),      # left arm into neck
    (12, 13),                        # head
)

_LSP_FLIP = ((0, 5), (1, 4), (2, 3), (6, 11), (7, 10), (8, 9))


def mpii_16() -> SkeletonGraph:
    """16-joint skeleton with pelvis/thorax spine (MPII joint order)."""
    return SkeletonGraph(16, _MPII_EDGES, _MPII_NAMES, _MPII_FLIP)


def lsp_14() -> SkeletonGraph:
    """14-joint skeleton without pelvis/thorax; hips link to the neck."""
    return SkeletonGraph(14, _LSP_EDGES, _LSP_NAMES, _LSP_FLIP)
