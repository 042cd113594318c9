"""Post-training surgery and inference modes.

Pruning removes leaves whose class distribution is close to uniform and
collapses the parents left with a single child. Projection overwrites
each prototype with its nearest latent patch from the training set so
that visualizations show real image content. Hard inference converts the
soft tree into a single root-to-leaf decision path.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tree as tr
from .data import Dataset


@dataclass(frozen=True)
class PruneReport:
    tau: float
    leaves_removed: int
    internal_removed: int
    fraction_pruned: float


@dataclass
class ProjectionRecord:
    node_index: int
    image_id: int
    location: tuple[int, int]
    distance: float
    constrained: bool
    fallback: bool = False


def default_tau(num_classes: int) -> float:
    return max(0.01, 1.2 / num_classes)


def prune(model, tau: float) -> PruneReport:
    """Drop leaves with max class probability <= tau, collapse parents.

    Whole subtrees whose leaves all fail the threshold disappear along
    with their prototypes; a parent left with one child is replaced by
    that child, so every surviving internal node keeps two children.
    Rejected without touching the model if nothing would survive.
    """
    topo = model.topology
    dists = model.leaves.distributions()
    if tau <= 1.0 / model.leaves.num_classes:
        warnings.warn(
            f"tau={tau} is not above uniform 1/K={1.0 / model.leaves.num_classes}; "
            "nothing will be pruned", stacklevel=2)
    keep_leaf = dists.max(axis=1) > tau
    if not keep_leaf.any():
        raise ValueError("pruning would remove every leaf; model unchanged")

    def collapse(ref: int):
        """Surviving shape of the subtree at ref, or None if fully pruned.

        A node whose children both survive stays; with one surviving
        child the node is superfluous and is replaced by that child.
        """
        if tr.is_leaf_ref(ref):
            old = tr.leaf_index(ref)
            return ("leaf", old) if keep_leaf[old] else None
        left = collapse(int(topo.left[ref]))
        right = collapse(int(topo.right[ref]))
        if left is None:
            return right
        if right is None:
            return left
        return ("node", ref, left, right)

    shape = collapse(topo.root)

    new_left: list[int] = []
    new_right: list[int] = []
    kept_nodes: list[int] = []
    kept_leaves: list[int] = []

    def number(piece) -> int:
        if piece[0] == "leaf":
            kept_leaves.append(piece[1])
            return tr.leaf_ref(len(kept_leaves) - 1)
        node = len(new_left)
        new_left.append(0)
        new_right.append(0)
        kept_nodes.append(piece[1])
        new_left[node] = number(piece[2])
        new_right[node] = number(piece[3])
        return node

    new_root = number(shape)

    old_internal = topo.num_internal
    old_leaves = topo.num_leaves
    proto_rows = [int(topo.prototype_index[i]) for i in kept_nodes]
    model.topology = tr.TreeTopology(
        left=np.asarray(new_left, dtype=np.int64),
        right=np.asarray(new_right, dtype=np.int64),
        prototype_index=np.arange(len(new_left), dtype=np.int64),
        root=new_root, height=topo.height)
    model.prototypes = tr.PrototypeBank(
        tr.Tensor(model.prototypes.tensor.values[proto_rows].copy(),
                  requires_grad=True))
    model.leaves = tr.LeafParams(model.leaves.logits[kept_leaves].copy(),
                                 norm=model.leaves.norm)
    model.topology.validate()
    model.projection = None
    model.projection_images = None
    internal_removed = old_internal - len(new_left)
    return PruneReport(tau=tau,
                       leaves_removed=old_leaves - len(kept_leaves),
                       internal_removed=internal_removed,
                       fraction_pruned=internal_removed / old_internal
                       if old_internal else 0.0)


def project(model, dataset: Dataset, constrained: bool = True,
            ) -> list[ProjectionRecord]:
    """Replace each prototype with its nearest latent training patch.

    With ``constrained`` set, candidates for node n are restricted to
    images labelled with the majority class of some leaf below n; empty
    pools fall back to the whole set, flagged in the record. Scanning is
    image-major, so ties resolve to the smallest image id and then the
    smallest row-major patch location.
    """
    latents = model.latents_per_image(dataset.images)        # N x D x H x W
    n_img, depth, h, w = latents.shape
    flat = latents.reshape(n_img, depth, h * w)
    leaf_majority = model.leaves.distributions().argmax(axis=1)
    records: list[ProjectionRecord] = []
    images = np.empty((model.topology.num_internal, *dataset.images.shape[1:]),
                      dtype=np.float32)
    for node in range(model.topology.num_internal):
        proto = model.prototypes.row(int(model.topology.prototype_index[node]))
        pool = np.arange(n_img)
        applied = False
        fallback = False
        if constrained:
            classes = {int(leaf_majority[l])
                       for l in model.topology.leaves_under(node)}
            mask = np.isin(dataset.labels, sorted(classes))
            if mask.any():
                pool = np.flatnonzero(mask)
                applied = True
            else:
                fallback = True
        diff = flat[pool] - proto.reshape(1, depth, 1)
        sq = np.einsum("ndl,ndl->nl", diff, diff)
        best = int(sq.argmin())
        img_pos, cell = divmod(best, h * w)
        image_id = int(pool[img_pos])
        i, j = divmod(cell, w)
        dist = float(np.sqrt(sq[img_pos, cell]))
        model.prototypes.tensor.values[
            int(model.topology.prototype_index[node])] = latents[image_id, :, i, j]
        images[node] = dataset.images[image_id]
        records.append(ProjectionRecord(node_index=node, image_id=image_id,
                                        location=(int(i), int(j)),
                                        distance=dist, constrained=applied,
                                        fallback=fallback))
    model.projection = records
    model.projection_images = images
    return records


def _edge_probabilities(model, images: np.ndarray,
                        ) -> tuple[np.ndarray, np.ndarray]:
    trace = tr.route(model.topology, model.prototypes, model.latent(images))
    return trace.edge_right.values, trace.leaf_probabilities.values


def hard_predict(model, image: np.ndarray, strategy: str,
                 ) -> tuple[np.ndarray, int, list[tuple[int, bool, float]]]:
    """Deterministic inference for one image.

    ``max_path`` follows the leaf with the highest path probability
    (ties to the smallest leaf index); ``greedy`` walks the tree going
    right exactly when p_right > 0.5. Returns the chosen leaf's class
    distribution, the leaf id, and the root-to-leaf decision sequence as
    (node, went_right, p_right) triples.
    """
    if strategy not in ("max_path", "greedy"):
        raise ValueError(f"unknown strategy {strategy!r}")
    batch = image[None] if image.ndim == 3 else image
    edge, pi = _edge_probabilities(model, batch)
    edge = edge[0]
    topo = model.topology
    if strategy == "max_path":
        leaf = int(pi[0].argmax())
        path = [(node, went_right, float(edge[node]))
                for node, went_right in topo.path_to_leaf(leaf)]
    else:
        path = []
        ref = topo.root
        while not tr.is_leaf_ref(ref):
            p_right = float(edge[ref])
            went_right = p_right > 0.5
            path.append((ref, went_right, p_right))
            ref = int(topo.right[ref]) if went_right else int(topo.left[ref])
        leaf = tr.leaf_index(ref)
    return model.leaves.distributions()[leaf], leaf, path


def _hard_leaves(model, images: np.ndarray, strategy: str) -> np.ndarray:
    """Vectorized leaf choice per sample for a whole batch."""
    edge, pi = _edge_probabilities(model, images)
    topo = model.topology
    n = images.shape[0]
    if strategy == "max_path":
        return pi.argmax(axis=1)
    leaves = np.empty(n, dtype=np.int64)
    for s in range(n):
        ref = topo.root
        while not tr.is_leaf_ref(ref):
            ref = int(topo.right[ref]) if edge[s, ref] > 0.5 \
                else int(topo.left[ref])
        leaves[s] = tr.leaf_index(ref)
    return leaves


def hard_accuracy(model, dataset: Dataset, strategy: str,
                  batch_size: int = 256) -> float:
    dists = model.leaves.distributions()
    correct = 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.images[start:start + batch_size]
        leaves = _hard_leaves(model, chunk, strategy)
        pred = dists[leaves].argmax(axis=1)
        correct += int((pred == dataset.labels[start:start + batch_size]).sum())
    return correct / len(dataset)


def fidelity(model, dataset: Dataset, strategy: str,
             batch_size: int = 256) -> float:
    """Fraction of samples where the hard strategy's class equals the
    soft prediction's class."""
    if len(dataset) == 0:
        raise ValueError("fidelity needs a non-empty dataset")
    if strategy == "soft":
        return 1.0
    if strategy not in ("max_path", "greedy"):
        raise ValueError(f"unknown strategy {strategy!r}")
    dists = model.leaves.distributions()
    agree = 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.images[start:start + batch_size]
        soft = model.soft_predict(chunk).argmax(axis=1)
        leaves = _hard_leaves(model, chunk, strategy)
        hard = dists[leaves].argmax(axis=1)
        agree += int((soft == hard).sum())
    return agree / len(dataset)


def ensemble_predict(models, images: np.ndarray) -> np.ndarray:
    """Mean of the member models' soft predictions."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    k = models[0].num_classes
    for m in models:
        if m.num_classes != k:
            raise ValueError("ensemble members disagree on the class count")
    total = np.zeros((images.shape[0], k), dtype=np.float64)
    for m in models:
        total += m.soft_predict(images)
    return (total / len(models)).astype(np.float32)


def path_length_stats(model, dataset: Dataset,
                      batch_size: int = 256) -> dict[str, float]:
    """Greedy root-to-leaf depth statistics over a dataset."""
    depths = model.topology.leaf_depths()
    seen = []
    for start in range(0, len(dataset), batch_size):
        leaves = _hard_leaves(model, dataset.images[start:start + batch_size],
                              "greedy")
        seen.append(depths[leaves])
    lengths = np.concatenate(seen)
    return {"mean": float(lengths.mean()), "std": float(lengths.std()),
            "min": int(lengths.min()), "max": int(lengths.max())}
