"""Randomized-tree visual vocabulary: forest building, word assignment,
bag-of-words encoding.

Each binary tree partitions descriptor space with randomly drawn
(dimension, threshold) splits; its leaves are the visual words. Global word
ids are per-tree leaf indices (assigned depth-first) offset by the leaf
counts of the preceding trees, so the id ranges of different trees are
disjoint and every descriptor maps to exactly ``n_trees`` words.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .features import Descriptor

DEFAULT_CANDIDATES = 5


class ForestFileError(Exception):
    """Raised for version mismatches or malformed forest files."""


@dataclass(frozen=True)
class ErtNode:
    """Internal node (word_id < 0) with a split, or a leaf (word_id >= 0)."""

    split_dim: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    word_id: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.word_id >= 0


class _TreeArrays:
    """Flat per-field arrays of one tree for vectorized batch routing."""

    def __init__(self, nodes: list[ErtNode]):
        self.split_dim = np.array([n.split_dim for n in nodes], dtype=np.int64)
        self.threshold = np.array([n.threshold for n in nodes])
        self.left = np.array([n.left for n in nodes], dtype=np.int64)
        self.right = np.array([n.right for n in nodes], dtype=np.int64)
        self.word_id = np.array([n.word_id for n in nodes], dtype=np.int64)

    def route(self, x: np.ndarray) -> np.ndarray:
        """Leaf word ids (tree-local) for every row of ``x``."""
        cur = np.zeros(x.shape[0], dtype=np.int64)
        active = np.nonzero(self.word_id[cur] < 0)[0]
        while active.size:
            idx = cur[active]
            go_left = x[active, self.split_dim[idx]] < self.threshold[idx]
            cur[active] = np.where(go_left, self.left[idx], self.right[idx])
            active = active[self.word_id[cur[active]] < 0]
        return self.word_id[cur]


@dataclass(frozen=True)
class ErtForest:
    trees: tuple[tuple[ErtNode, ...], ...]
    n_trees: int
    max_depth: int
    descriptor_dim: int
    seed: int
    _arrays: tuple[_TreeArrays, ...] = field(init=False, repr=False, compare=False)
    _offsets: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        arrays = tuple(_TreeArrays(list(t)) for t in self.trees)
        counts = [int((a.word_id >= 0).sum()) for a in arrays]
        offsets = np.concatenate([[0], np.cumsum(counts)])
        object.__setattr__(self, "_arrays", arrays)
        object.__setattr__(self, "_offsets", offsets)

    @property
    def vocabulary_size(self) -> int:
        return int(self._offsets[-1])


def _as_matrix(descs) -> np.ndarray:
    """Coerce descriptor collections ((n,d) array, Descriptors, or
    (Keypoint, Descriptor) pairs) to a float matrix."""
    if isinstance(descs, np.ndarray):
        mat = np.atleast_2d(np.asarray(descs, dtype=np.float64))
    else:
        rows = []
        for item in descs:
            if isinstance(item, Descriptor):
                rows.append(item.values)
            elif isinstance(item, tuple) and len(item) == 2:
                rows.append(np.asarray(item[1]))
            else:
                rows.append(np.asarray(item, dtype=np.float64))
        if not rows:
            return np.zeros((0, 0))
        mat = np.stack(rows).astype(np.float64)
    return mat


def sample_training_descriptors(images, per_image: int, seed: int = 0) -> np.ndarray:
    """Uniform sample without replacement of up to ``per_image`` descriptors
    from each image's descriptor list, concatenated in image order."""
    if per_image < 1:
        raise ValueError(f"per_image must be >= 1, got {per_image}")
    images = list(images)
    if not images:
        raise ValueError("no images to sample from")
    rng = np.random.default_rng(seed)
    chunks = []
    for img_descs in images:
        mat = _as_matrix(img_descs)
        if mat.shape[0] == 0:
            continue
        if mat.shape[0] <= per_image:
            chunks.append(mat)
        else:
            sel = np.sort(rng.choice(mat.shape[0], size=per_image, replace=False))
            chunks.append(mat[sel])
    if not chunks:
        raise ValueError("all images were empty; nothing to sample")
    return np.concatenate(chunks, axis=0)


def _grow_tree(data: np.ndarray, tree_index: int, max_depth: int, min_leaf: int,
               seed: int, n_candidates: int) -> list[ErtNode]:
    """Grow one tree; every node draws its candidates from its own RNG stream
    keyed by (seed, tree, heap position), so deepening the tree never
    changes the splits above."""
    nodes: list[ErtNode] = []
    n_dims = data.shape[1]
    leaf_counter = [0]

    def grow(indices: np.ndarray, depth: int, heap: int) -> int:
        node_id = len(nodes)
        nodes.append(ErtNode())
        chosen = None
        if depth < max_depth and indices.size >= 2 * min_leaf:
            rng = np.random.default_rng(np.random.SeedSequence((seed, tree_index, heap)))
            values = data[indices]
            lo = values.min(axis=0)
            hi = values.max(axis=0)
            best_gap = None
            for _ in range(n_candidates):
                dim = int(rng.integers(0, n_dims))
                thr = float(rng.uniform(lo[dim], hi[dim]))
                mask = values[:, dim] < thr
                n_left = int(mask.sum())
                if n_left == 0 or n_left == indices.size:
                    continue
                gap = abs(2 * n_left - indices.size)
                if best_gap is None or gap < best_gap:
                    best_gap = gap
                    chosen = (dim, thr, mask)
        if chosen is None:
            word = leaf_counter[0]
            leaf_counter[0] += 1
            nodes[node_id] = ErtNode(word_id=word)
            return node_id
        dim, thr, mask = chosen
        left = grow(indices[mask], depth + 1, 2 * heap)
        right = grow(indices[~mask], depth + 1, 2 * heap + 1)
        nodes[node_id] = ErtNode(split_dim=dim, threshold=thr, left=left, right=right)
        return node_id

    grow(np.arange(data.shape[0]), 0, 1)
    return nodes


def build_forest(train: np.ndarray, n_trees: int = 4, max_depth: int = 12,
                 min_leaf: int = 1, seed: int = 0,
                 n_candidates: int = DEFAULT_CANDIDATES) -> ErtForest:
    """Build ``n_trees`` trees over the training matrix.

    At each node, ``n_candidates`` random (dimension, threshold) splits are
    drawn and the most balanced one kept; a node becomes a leaf at
    ``max_depth``, below ``2 * min_leaf`` population, or when no candidate
    separates the data.
    """
    train = _as_matrix(train)
    if train.size == 0:
        raise ValueError("training set is empty")
    if n_trees < 1 or max_depth < 1:
        raise ValueError("n_trees and max_depth must be >= 1")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    trees = tuple(
        tuple(_grow_tree(train, t, max_depth, min_leaf, seed, n_candidates))
        for t in range(n_trees)
    )
    return ErtForest(trees=trees, n_trees=n_trees, max_depth=max_depth,
                     descriptor_dim=train.shape[1], seed=seed)


def assign_words(forest: ErtForest, desc) -> list[int]:
    """Global word id per tree for one descriptor."""
    return assign_words_batch(forest, _as_matrix([desc]))[0].tolist()


def assign_words_batch(forest: ErtForest, mat: np.ndarray) -> np.ndarray:
    """(n, n_trees) global word ids for a descriptor matrix."""
    mat = _as_matrix(mat)
    if mat.shape[0] and mat.shape[1] != forest.descriptor_dim:
        raise ValueError(f"descriptor dim {mat.shape[1]} does not match "
                         f"forest dim {forest.descriptor_dim}")
    out = np.empty((mat.shape[0], forest.n_trees), dtype=np.int64)
    for t, arrays in enumerate(forest._arrays):
        out[:, t] = arrays.route(mat) + forest._offsets[t]
    return out


@dataclass(frozen=True)
class BowHistogram:
    """Visual word frequencies. ``encode`` emits unit L1 mass (or all zeros
    for an image without descriptors); fusing with a zero side leaves a
    half-mass block, so the constructor only enforces non-negativity."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.counts, dtype=np.float64)
        if c.ndim != 1:
            raise ValueError("histogram must be 1-D")
        if c.size and c.min() < 0:
            raise ValueError("histogram entries must be non-negative")
        c.flags.writeable = False
        object.__setattr__(self, "counts", c)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.counts, dtype=dtype)

    def __len__(self) -> int:
        return self.counts.shape[0]


def encode(forest: ErtForest, descs) -> BowHistogram:
    """Count every word id of every descriptor, then L1-normalize."""
    mat = _as_matrix(descs)
    if mat.shape[0] == 0:
        return BowHistogram(np.zeros(forest.vocabulary_size))
    words = assign_words_batch(forest, mat)
    counts = np.bincount(words.ravel(), minlength=forest.vocabulary_size).astype(np.float64)
    return BowHistogram(counts / counts.sum())


def fuse(h1: BowHistogram, h2: BowHistogram) -> BowHistogram:
    """Concatenate two encodings, halving each so the result stays normalized."""
    return BowHistogram(np.concatenate([0.5 * np.asarray(h1), 0.5 * np.asarray(h2)]))


FOREST_FORMAT_VERSION = 1


def save_forest(path, forest: ErtForest) -> None:
    doc = {
        "version": FOREST_FORMAT_VERSION,
        "n_trees": forest.n_trees,
        "max_depth": forest.max_depth,
        "dim": forest.descriptor_dim,
        "seed": forest.seed,
        "vocabulary_size": forest.vocabulary_size,
        "trees": [
            [[n.split_dim, n.threshold, n.left, n.right, n.word_id] for n in tree]
            for tree in forest.trees
        ],
    }
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_forest(path) -> ErtForest:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ForestFileError(f"{path}: not a valid forest file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != FOREST_FORMAT_VERSION:
        raise ForestFileError(f"{path}: unsupported forest version "
                              f"{doc.get('version') if isinstance(doc, dict) else doc!r}")
    try:
        trees = tuple(
            tuple(ErtNode(split_dim=int(r[0]), threshold=float(r[1]), left=int(r[2]),
                          right=int(r[3]), word_id=int(r[4])) for r in tree)
            for tree in doc["trees"]
        )
        forest = ErtForest(trees=trees, n_trees=int(doc["n_trees"]),
                           max_depth=int(doc["max_depth"]),
                           descriptor_dim=int(doc["dim"]), seed=int(doc["seed"]))
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ForestFileError(f"{path}: malformed forest file: {exc}") from exc
    if forest.vocabulary_size != doc.get("vocabulary_size"):
        raise ForestFileError(f"{path}: vocabulary size mismatch")
    return forest
