"""Faithful visualization of a projected model.

Each surviving prototype is rendered as a crop of the training image it
was projected onto: the per-patch similarity grid is upsampled with
bicubic (Catmull-Rom) interpolation to the input resolution and a
one-latent-cell receptive rectangle is cut around its maximum. The
global tree is exported as DOT plus a dependency-free HTML page, and a
single sample can additionally be traced along its greedy path.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import refine
from . import tree as tr
from .data import save_ppm


@dataclass
class SimilarityMap:
    scores: np.ndarray        # H x W, each cell exp(-patch distance)
    prototype_index: int
    image_id: int | None = None


@dataclass
class ExplanationGraph:
    out_dir: str
    patch_paths: dict[int, str] = field(default_factory=dict)
    edges: list[tuple[str, str, str]] = field(default_factory=list)
    leaf_labels: dict[int, tuple[int, float]] = field(default_factory=dict)
    files: list[str] = field(default_factory=list)
    sample_path: list[tuple[int, bool, float]] | None = None


def similarity_map(backbone, model, prototype_index: int,
                   image: np.ndarray) -> SimilarityMap:
    """Per-patch similarity of one image against one prototype."""
    if not 0 <= prototype_index < model.prototypes.count:
        raise ValueError(f"prototype index {prototype_index} out of range "
                         f"0..{model.prototypes.count - 1}")
    latent = backbone.forward(image[None]).values[0]
    proto = model.prototypes.row(prototype_index)
    grid = tr._patch_squared_distances(latent, proto)
    return SimilarityMap(scores=np.exp(-np.sqrt(grid)),
                         prototype_index=prototype_index)


def catmull_rom_weight(t: np.ndarray) -> np.ndarray:
    """Bicubic kernel with a = -0.5."""
    at = np.abs(t)
    w = np.zeros_like(at)
    near = at <= 1.0
    far = (at > 1.0) & (at < 2.0)
    w[near] = 1.5 * at[near] ** 3 - 2.5 * at[near] ** 2 + 1.0
    w[far] = -0.5 * at[far] ** 3 + 2.5 * at[far] ** 2 - 4.0 * at[far] + 2.0
    return w


def _resample_matrix(src: int, dst: int) -> np.ndarray:
    """dst x src weight matrix for 1-D Catmull-Rom with edge clamping."""
    out = np.zeros((dst, src))
    centers = (np.arange(dst) + 0.5) * src / dst - 0.5
    base = np.floor(centers).astype(int)
    for offset in (-1, 0, 1, 2):
        idx = base + offset
        w = catmull_rom_weight(centers - idx)
        np.add.at(out, (np.arange(dst), np.clip(idx, 0, src - 1)), w)
    return out


def bicubic_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = grid.shape
    rows = _resample_matrix(h, out_h)
    cols = _resample_matrix(w, out_w)
    return rows @ grid @ cols.T


def extract_patch(sim: SimilarityMap, source_image: np.ndarray,
                  ) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Crop around the upsampled similarity maximum.

    The crop covers one latent cell's share of the image
    (side / H by side / W pixels) and the returned bounding box
    (top, left, height, width) is clamped to stay inside the image.
    """
    _, side_h, side_w = source_image.shape
    upsampled = bicubic_upsample(sim.scores, side_h, side_w)
    flat = int(upsampled.argmax())
    r, c = divmod(flat, side_w)
    ph = max(1, round(side_h / sim.scores.shape[0]))
    pw = max(1, round(side_w / sim.scores.shape[1]))
    top = min(max(0, r - ph // 2), side_h - ph)
    left = min(max(0, c - pw // 2), side_w - pw)
    return source_image[:, top:top + ph, left:left + pw].copy(), \
        (top, left, ph, pw)


def write_png(path: str, image: np.ndarray) -> None:
    """Minimal RGB PNG writer (8-bit, no interlacing)."""
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = quantized.shape[1:]
    rows = quantized.transpose(1, 2, 0)
    raw = b"".join(b"\x00" + rows[y].tobytes() for y in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        body = tag + payload
        return struct.pack(">I", len(payload)) + body + \
            struct.pack(">I", zlib.crc32(body))

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(chunk(b"IHDR", header))
        fh.write(chunk(b"IDAT", zlib.compress(raw, 6)))
        fh.write(chunk(b"IEND", b""))


def _save_image(path: str, image: np.ndarray, png: bool) -> None:
    if png:
        write_png(path, image)
    else:
        save_ppm(path, image)


def _class_label(model, k: int) -> str:
    if model.class_names and k < len(model.class_names):
        return model.class_names[k]
    return f"class {k}"


def _dot_lines(model, patch_rel: dict[int, str]) -> list[str]:
    topo = model.topology
    dists = model.leaves.distributions()
    lines = ["digraph prototree {", "  rankdir=TB;",
             '  node [shape=box, fontname="sans"];']
    for node in range(topo.num_internal):
        lines.append(f'  node{node} [label="node {node}", '
                     f'image="{patch_rel[node]}", labelloc=b];')
    for leaf in range(topo.num_leaves):
        k = int(dists[leaf].argmax())
        lines.append(f'  leaf{leaf} [shape=ellipse, label="'
                     f'{_class_label(model, k)}\\np={dists[leaf, k]:.3f}"];')

    def ref_name(ref: int) -> str:
        return f"leaf{tr.leaf_index(ref)}" if tr.is_leaf_ref(ref) \
            else f"node{ref}"

    for node in range(topo.num_internal):
        lines.append(f'  node{node} -> {ref_name(int(topo.left[node]))} '
                     f'[label="absent"];')
        lines.append(f'  node{node} -> {ref_name(int(topo.right[node]))} '
                     f'[label="present"];')
    lines.append("}")
    return lines


def _html_tree(model, patch_rel: dict[int, str]) -> str:
    topo = model.topology
    dists = model.leaves.distributions()

    def render(ref: int) -> str:
        if tr.is_leaf_ref(ref):
            leaf = tr.leaf_index(ref)
            k = int(dists[leaf].argmax())
            return (f"<li class='leaf'>leaf {leaf}: "
                    f"<b>{_class_label(model, k)}</b> "
                    f"(p={dists[leaf, k]:.3f})</li>")
        return (f"<li>node {ref} <img src='{patch_rel[ref]}' "
                f"alt='prototype {ref}'><ul>"
                f"<li class='edge'>absent</li>{render(int(topo.left[ref]))}"
                f"<li class='edge'>present</li>{render(int(topo.right[ref]))}"
                f"</ul></li>")

    return ("<!DOCTYPE html><html><head><meta charset='utf-8'>"
            "<title>prototype tree</title><style>"
            "ul{list-style:none} li{margin:2px} .edge{color:#888;font-style:italic}"
            " img{height:48px;vertical-align:middle;margin-left:6px}"
            "</style></head><body><h1>prototype tree</h1><ul>"
            f"{render(topo.root)}</ul></body></html>")


def export_tree(model, out_dir: str, sample: np.ndarray | None = None,
                sample_name: str = "sample", png: bool = False,
                ) -> ExplanationGraph:
    """Write patch images, tree.dot and tree.html; optionally a local
    greedy-path page for one sample. The model must be projected first,
    otherwise the patches would not show what the tree actually matches.
    """
    if model.projection is None:
        raise ValueError("export requires a projected model")
    os.makedirs(out_dir, exist_ok=True)
    proto_dir = os.path.join(out_dir, "prototypes")
    os.makedirs(proto_dir, exist_ok=True)
    ext = "png" if png else "ppm"
    graph = ExplanationGraph(out_dir=out_dir)
    patch_rel: dict[int, str] = {}
    for record in model.projection:
        node = record.node_index
        source = model.projection_images[node]
        sim = similarity_map(model.backbone, model,
                             int(model.topology.prototype_index[node]), source)
        sim.image_id = record.image_id
        patch, _ = extract_patch(sim, source)
        rel = os.path.join("prototypes", f"node_{node}.{ext}")
        _save_image(os.path.join(out_dir, rel), patch, png)
        patch_rel[node] = rel
        graph.patch_paths[node] = os.path.join(out_dir, rel)
        graph.files.append(graph.patch_paths[node])

    dot_path = os.path.join(out_dir, "tree.dot")
    with open(dot_path, "w") as fh:
        fh.write("\n".join(_dot_lines(model, patch_rel)) + "\n")
    graph.files.append(dot_path)

    html_path = os.path.join(out_dir, "tree.html")
    with open(html_path, "w") as fh:
        fh.write(_html_tree(model, patch_rel))
    graph.files.append(html_path)

    topo = model.topology
    dists = model.leaves.distributions()
    for leaf in range(topo.num_leaves):
        k = int(dists[leaf].argmax())
        graph.leaf_labels[leaf] = (k, float(dists[leaf, k]))
    for node in range(topo.num_internal):
        for label, child in (("absent", int(topo.left[node])),
                             ("present", int(topo.right[node]))):
            name = f"leaf{tr.leaf_index(child)}" if tr.is_leaf_ref(child) \
                else f"node{child}"
            graph.edges.append((f"node{node}", name, label))

    if sample is not None:
        graph.sample_path = _export_sample(model, sample, sample_name,
                                           out_dir, patch_rel, png, graph)
    return graph


def _export_sample(model, sample: np.ndarray, name: str, out_dir: str,
                   patch_rel: dict[int, str], png: bool,
                   graph: ExplanationGraph) -> list[tuple[int, bool, float]]:
    dist, leaf, path = refine.hard_predict(model, sample, "greedy")
    latent = model.latent(sample[None]).values[0]
    side = sample.shape[1]
    h, w = latent.shape[1:]
    ext = "png" if png else "ppm"
    found_dir = os.path.join(out_dir, f"explain_{name}_patches")
    os.makedirs(found_dir, exist_ok=True)
    rows = []
    for node, went_right, p_right in path:
        proto = model.prototypes.row(int(model.topology.prototype_index[node]))
        (i, j), _ = tr.nearest_patch(latent, proto)
        ph, pw = max(1, round(side / h)), max(1, round(side / w))
        top = min(max(0, i * ph), side - ph)
        left = min(max(0, j * pw), side - pw)
        crop = sample[:, top:top + ph, left:left + pw]
        rel = os.path.join(f"explain_{name}_patches", f"node_{node}.{ext}")
        _save_image(os.path.join(out_dir, rel), crop, png)
        graph.files.append(os.path.join(out_dir, rel))
        rows.append((node, went_right, p_right, rel))
    k = int(np.argmax(dist))
    body = "".join(
        f"<tr><td>node {node}</td>"
        f"<td><img src='{patch_rel[node]}'></td>"
        f"<td><img src='{rel}'></td>"
        f"<td>p_right={p:.4f}</td>"
        f"<td>{'present' if right else 'absent'}</td></tr>"
        for node, right, p, rel in rows)
    html = ("<!DOCTYPE html><html><head><meta charset='utf-8'>"
            f"<title>decision path: {name}</title><style>"
            "img{height:48px} td{padding:4px;border:1px solid #ccc}"
            "table{border-collapse:collapse}</style></head><body>"
            f"<h1>greedy path for {name}</h1>"
            "<table><tr><th>node</th><th>prototype</th><th>found patch</th>"
            f"<th>p_right</th><th>decision</th></tr>{body}</table>"
            f"<p>leaf {leaf}: <b>{_class_label(model, k)}</b> "
            f"(p={dist[k]:.3f})</p></body></html>")
    page = os.path.join(out_dir, f"explain_{name}.html")
    with open(page, "w") as fh:
        fh.write(html)
    graph.files.append(page)
    return [(node, right, p) for node, right, p, _ in rows]
