"""Deterministic string embeddings and the path-augmented node input matrix."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tree import AstGraph


@dataclass(frozen=True)
class EmbedderConfig:
    dim: int = 768
    ngram_sizes: tuple[int, ...] = (3, 4)
    hash_seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("embedding dim must be >= 2")
        if not self.ngram_sizes or any(k < 1 for k in self.ngram_sizes):
            raise ValueError("ngram_sizes must be a non-empty list of positive ints")
        object.__setattr__(self, "ngram_sizes", tuple(int(k) for k in self.ngram_sizes))


@lru_cache(maxsize=1 << 18)
def _bucket(gram: str, dim: int, seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8,
                             key=seed.to_bytes(8, "little", signed=True)).digest()
    h = int.from_bytes(digest, "little")
    return h % dim, (1.0 if (h >> 63) & 1 else -1.0)


def embed_text(s: str, cfg: EmbedderConfig) -> np.ndarray:
    """Signed feature hashing of character n-grams, L2-normalized.

    Strings shorter than every n-gram size fall back to hashing the whole
    string so that only the empty string maps to the zero vector.
    """
    v = np.zeros(cfg.dim)
    if not s:
        return v
    grams = [s[i:i + k] for k in cfg.ngram_sizes for i in range(len(s) - k + 1)]
    if not grams:
        grams = [s]
    for g in grams:
        b, sign = _bucket(g, cfg.dim, cfg.hash_seed)
        v[b] += sign
    norm = np.linalg.norm(v)
    # collisions can cancel every count to zero
    return v / norm if norm > 0 else v


def node_features(graph: AstGraph, cfg: EmbedderConfig) -> np.ndarray:
    return np.stack([embed_text(nd.label(), cfg) for nd in graph.nodes])


def path_string(graph: AstGraph, path: list[int]) -> str:
    return "/".join(graph.nodes[v].label() for v in path)


def path_features(graph: AstGraph, cfg: EmbedderConfig) -> np.ndarray:
    if not graph.paths:
        return np.zeros((0, cfg.dim))
    return np.stack([embed_text(path_string(graph, p), cfg) for p in graph.paths])


def augment(x0_node: np.ndarray, x0_path: np.ndarray, graph: AstGraph) -> np.ndarray:
    """Add to each node row the mean of the rows of every path through it.

    Nodes that lie only on paths dropped by the path cap get no path term.
    """
    n = graph.n
    if x0_node.shape[0] != n or x0_path.shape[0] != len(graph.paths):
        raise ValueError("feature shapes do not match the graph")
    membership = np.zeros((n, len(graph.paths)))
    for j, path in enumerate(graph.paths):
        membership[path, j] = 1.0
    counts = membership.sum(axis=1, keepdims=True)
    weights = np.divide(membership, counts, out=np.zeros_like(membership), where=counts > 0)
    return x0_node + weights @ x0_path


@dataclass
class InputPack:
    x0_node: np.ndarray
    x0_path: np.ndarray
    x0_ast: np.ndarray = field(repr=False)


def build_inputs(graph: AstGraph, cfg: EmbedderConfig) -> InputPack:
    xn = node_features(graph, cfg)
    xp = path_features(graph, cfg)
    return InputPack(xn, xp, augment(xn, xp, graph))
