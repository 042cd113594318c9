"""Soft binary decision tree routed by prototype similarity.

Internal nodes each own one row of the prototype bank. An input's latent
grid is compared against a node's prototype over all spatial patches; the
smallest Euclidean distance d yields the right-edge probability exp(-d),
the left edge taking the complement. Leaf path probabilities are the
products of edge probabilities along root-to-leaf paths, and the
prediction is the path-probability-weighted mix of the leaves' softmaxed
class logits.

Child references in the topology are plain ints: values >= 0 index
internal nodes, values < 0 encode leaf ``-(index + 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DISTANCE_GRAD_EPS = 1e-12  # keeps the norm's derivative finite at zero


def leaf_ref(leaf_index: int) -> int:
    return -(leaf_index + 1)


def is_leaf_ref(ref: int) -> bool:
    return ref < 0


def leaf_index(ref: int) -> int:
    return -ref - 1


@dataclass
class TreeTopology:
    """Binary tree structure: child tables for internal nodes.

    Internal node i owns prototype row ``prototype_index[i]`` (identity
    after every rebuild). ``root`` may itself be a leaf reference when
    pruning collapsed the whole upper tree.
    """

    left: np.ndarray
    right: np.ndarray
    prototype_index: np.ndarray
    root: int
    height: int

    @property
    def num_internal(self) -> int:
        return len(self.left)

    @property
    def num_leaves(self) -> int:
        return self.num_internal + 1

    def children(self, node: int) -> tuple[int, int]:
        return int(self.left[node]), int(self.right[node])

    def validate(self) -> None:
        seen_leaves: list[int] = []
        seen_nodes: list[int] = []

        def walk(ref: int) -> None:
            if is_leaf_ref(ref):
                seen_leaves.append(leaf_index(ref))
                return
            seen_nodes.append(ref)
            walk(int(self.left[ref]))
            walk(int(self.right[ref]))

        walk(self.root)
        if sorted(seen_nodes) != list(range(self.num_internal)):
            raise ValueError("internal nodes are not a bijection onto 0..M-1")
        if sorted(seen_leaves) != list(range(self.num_leaves)):
            raise ValueError("leaves are not numbered 0..L-1")
        if sorted(self.prototype_index.tolist()) != list(range(self.num_internal)):
            raise ValueError("prototype_index is not a bijection onto bank rows")

    def path_to_leaf(self, leaf: int) -> list[tuple[int, bool]]:
        """Root-to-leaf decision sequence as (node, went_right) pairs."""
        path: list[tuple[int, bool]] = []

        def walk(ref: int) -> bool:
            if is_leaf_ref(ref):
                return leaf_index(ref) == leaf
            for went_right, child in ((False, int(self.left[ref])),
                                      (True, int(self.right[ref]))):
                path.append((ref, went_right))
                if walk(child):
                    return True
                path.pop()
            return False

        if not walk(self.root):
            raise ValueError(f"leaf {leaf} not in tree")
        return path

    def leaf_depths(self) -> np.ndarray:
        depths = np.zeros(self.num_leaves, dtype=np.int64)

        def walk(ref: int, depth: int) -> None:
            if is_leaf_ref(ref):
                depths[leaf_index(ref)] = depth
                return
            walk(int(self.left[ref]), depth + 1)
            walk(int(self.right[ref]), depth + 1)

        walk(self.root, 0)
        return depths

    def leaves_under(self, node: int) -> list[int]:
        out: list[int] = []

        def walk(ref: int) -> None:
            if is_leaf_ref(ref):
                out.append(leaf_index(ref))
                return
            walk(int(self.left[ref]))
            walk(int(self.right[ref]))

        walk(node)
        return out


@dataclass
class PrototypeBank:
    """All prototype vectors, one row per internal node (1x1 patches)."""

    tensor: Tensor

    @property
    def count(self) -> int:
        return self.tensor.shape[0]

    @property
    def depth(self) -> int:
        return self.tensor.shape[1]

    def row(self, i: int) -> np.ndarray:
        return self.tensor.values[i]


@dataclass
class LeafParams:
    """Per-leaf class logits, trained derivative-free (never on a tape)."""

    logits: np.ndarray
    norm: str = "softmax"  # "l1" is the non-default alternative

    @property
    def num_leaves(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def distributions(self, logits: np.ndarray | None = None) -> np.ndarray:
        c = self.logits if logits is None else logits
        if self.norm == "l1":
            totals = c.sum(axis=1, keepdims=True)
            out = np.full_like(c, 1.0 / c.shape[1])
            ok = totals[:, 0] > 0
            out[ok] = c[ok] / totals[ok]
            return out
        shifted = c - c.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


@dataclass
class RoutingTrace:
    """Per-node routing evidence and per-leaf path probabilities.

    All fields are batched over the leading sample axis. ``edge_right``
    and ``leaf_probabilities`` stay on the tape so gradients reach the
    prototypes and the backbone.
    """

    edge_right: Tensor            # N x M
    distances: np.ndarray         # N x M
    locations: np.ndarray         # N x M x 2 (row, col) of the nearest patch
    leaf_probabilities: Tensor    # N x L


def init_tree(h: int, num_classes: int, depth: int, seed: int,
              dtype=np.float32, leaf_norm: str = "softmax",
              ) -> tuple[TreeTopology, PrototypeBank, LeafParams]:
    """Full tree of height h: prototypes ~ N(0.5, 0.1), leaf logits zero."""
    if h < 1:
        raise ValueError(f"height must be >= 1, got {h}")
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if depth < 1:
        raise ValueError(f"prototype depth must be >= 1, got {depth}")
    left: list[int] = []
    right: list[int] = []
    next_leaf = 0

    def build(level: int) -> int:
        nonlocal next_leaf
        if level == h:
            ref = leaf_ref(next_leaf)
            next_leaf += 1
            return ref
        node = len(left)
        left.append(0)
        right.append(0)
        left[node] = build(level + 1)
        right[node] = build(level + 1)
        return node

    root = build(0)
    topology = TreeTopology(left=np.asarray(left, dtype=np.int64),
                            right=np.asarray(right, dtype=np.int64),
                            prototype_index=np.arange(len(left), dtype=np.int64),
                            root=root, height=h)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7EE)))
    protos = rng.normal(0.5, 0.1, (topology.num_internal, depth)).astype(dtype)
    bank = PrototypeBank(Tensor(protos, requires_grad=True))
    # leaf logits live in float64: they are count-like accumulations and
    # never enter the gradient tape, so storage precision is free
    leaves = LeafParams(np.zeros((topology.num_leaves, num_classes),
                                 dtype=np.float64), norm=leaf_norm)
    return topology, bank, leaves


def _patch_squared_distances(latent: np.ndarray, proto: np.ndarray) -> np.ndarray:
    """H x W grid of squared Euclidean distances, exact for exact matches."""
    diff = latent - proto.reshape(-1, 1, 1)
    return (diff * diff).sum(axis=0)


def nearest_patch(latent, prototype) -> tuple[tuple[int, int], float]:
    """Location and distance of the patch closest to one prototype.

    Ties break to the smallest row-major index.
    """
    lat = latent.values if isinstance(latent, Tensor) else np.asarray(latent)
    proto = prototype.values if isinstance(prototype, Tensor) else np.asarray(prototype)
    if lat.ndim != 3:
        raise ValueError(f"latent must be D x H x W, got shape {lat.shape}")
    if proto.ndim != 1 or proto.shape[0] != lat.shape[0]:
        raise ValueError(
            f"prototype depth {proto.shape} does not match latent depth "
            f"{lat.shape[0]}")
    grid = _patch_squared_distances(lat, proto)
    flat = int(grid.argmin())
    i, j = divmod(flat, grid.shape[1])
    return (i, j), float(np.sqrt(grid[i, j]))


def edge_probability(distance: float) -> float:
    """Right-edge routing probability exp(-distance)."""
    if not np.isfinite(distance) or distance < 0:
        raise ValueError(f"distance must be finite and >= 0, got {distance}")
    return float(np.exp(-distance))


def min_patch_distances(latent: Tensor, prototypes: Tensor,
                        ) -> tuple[Tensor, np.ndarray]:
    """Per-sample, per-prototype distance to the nearest latent patch.

    Returns an N x M tensor of min-pooled Euclidean distances plus the
    argmin locations (N x M x 2). The gradient flows only through each
    selected patch; ties resolve to the smallest row-major index before
    the backward pass, so backward is deterministic.
    """
    lat = latent.values
    if lat.ndim == 3:
        raise ValueError("min_patch_distances expects a batched N x D x H x W latent")
    n, d, h, w = lat.shape
    protos = prototypes.values
    m = protos.shape[0]
    if protos.shape[1] != d:
        raise ValueError(f"prototype depth {protos.shape[1]} != latent depth {d}")
    flat = lat.reshape(n, d, h * w)
    sq = np.empty((n, m, h * w), dtype=lat.dtype)
    for k in range(m):
        diff = flat - protos[k].reshape(1, d, 1)
        sq[:, k] = np.einsum("ndl,ndl->nl", diff, diff)
    argmin = sq.argmin(axis=2)
    sq_min = np.take_along_axis(sq, argmin[:, :, None], axis=2)[:, :, 0]
    dist = np.sqrt(sq_min)
    locations = np.stack([argmin // w, argmin % w], axis=2)

    def bwd(g):
        coeff = g / np.sqrt(sq_min + DISTANCE_GRAD_EPS)
        rows = np.arange(n)[:, None]
        selected = flat.transpose(0, 2, 1)[rows, argmin]      # N x M x D
        diff_sel = selected - protos[None]                    # z - p
        if prototypes.requires_grad:
            prototypes.grad += -(coeff[:, :, None] * diff_sel).sum(axis=0)
        if latent.requires_grad:
            gl = np.zeros((n, h * w, d), dtype=lat.dtype)
            np.add.at(gl, (rows, argmin), coeff[:, :, None] * diff_sel)
            latent.grad += gl.transpose(0, 2, 1).reshape(n, d, h, w)

    return ad.record_op(dist, [latent, prototypes], bwd), locations


def route(topology: TreeTopology, prototypes: PrototypeBank,
          latent: Tensor) -> RoutingTrace:
    """Soft-route a latent batch: all edge and leaf path probabilities.

    A single D x H x W latent is promoted to a batch of one (detached
    from any tape; pass the batched form when its gradient is needed).
    """
    lat = Tensor(latent.values[None]) if latent.values.ndim == 3 else latent
    n = lat.shape[0]
    if prototypes.depth != lat.shape[1]:
        raise ValueError(
            f"tree prototype depth {prototypes.depth} != latent depth {lat.shape[1]}")
    distances, locations = min_patch_distances(lat, prototypes.tensor)
    edge_right = ad.exp(ad.neg(distances))
    leaf_probs: list[Tensor | None] = [None] * topology.num_leaves

    def walk(ref: int, prob: Tensor) -> None:
        if is_leaf_ref(ref):
            leaf_probs[leaf_index(ref)] = prob
            return
        p_right = ad.select_column(edge_right, ref)
        walk(int(topology.left[ref]), ad.mul(prob, ad.sub(1.0, p_right)))
        walk(int(topology.right[ref]), ad.mul(prob, p_right))

    walk(topology.root, Tensor(np.ones(n, dtype=lat.dtype)))
    pi = ad.stack_columns([p for p in leaf_probs])
    return RoutingTrace(edge_right=edge_right,
                        distances=distances.values.copy(),
                        locations=locations,
                        leaf_probabilities=pi)


def mix_leaf_distributions(pi: Tensor, distributions: np.ndarray) -> Tensor:
    """Convex combination of leaf class distributions weighted by paths."""
    return ad.matmul(pi, Tensor(np.asarray(distributions, dtype=pi.dtype)))


def predict(topology: TreeTopology, prototypes: PrototypeBank,
            leaves: LeafParams, latent: Tensor,
            ) -> tuple[Tensor, RoutingTrace]:
    """Class probability distribution over the batch, plus the trace."""
    trace = route(topology, prototypes, latent)
    y_hat = mix_leaf_distributions(trace.leaf_probabilities,
                                   leaves.distributions())
    return y_hat, trace
