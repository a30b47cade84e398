"""Poincare-ball embeddings of entities trained on a link graph.

Entities that occur together (graph edges) are pulled together under the
hyperbolic distance

    d(u, v) = arcosh(1 + 2 * |u - v|^2 / ((1 - |u|^2) * (1 - |v|^2)))

with a negative-sampling ranking loss per edge (a, b):

    L = -log( exp(-d(a, b)) / sum_{x in {b} + negatives} exp(-d(a, x)) )

optimized by Riemannian SGD: the Euclidean gradient at a point p is scaled
by ((1 - |p|^2)^2) / 4 before the step, and points are reprojected to stay
within max_norm of the origin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from .store import VectorStore, read_store, write_store

logger = logging.getLogger(__name__)

_EPS = 1e-12


class GraphFormatError(Exception):
    """Raised for malformed graph files or invalid graph structure."""


class TrainingDivergedError(Exception):
    """Raised when the embedding loss becomes non-finite."""


@dataclass
class LinkGraph:
    """Undirected co-occurrence graph over entity ids with integer edge weights."""

    nodes: list[str]
    edges: list[tuple[str, str, int]] = field(default_factory=list)

    def __post_init__(self):
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise GraphFormatError("duplicate node ids in graph")
        for src, dst, weight in self.edges:
            if src == dst:
                raise GraphFormatError(f"self-loop on {src!r}")
            if src not in node_set or dst not in node_set:
                raise GraphFormatError(f"edge ({src!r}, {dst!r}) references unknown node")
            if weight < 1:
                raise GraphFormatError(f"edge ({src!r}, {dst!r}) has non-positive weight {weight}")


def load_graph(path: str | Path) -> LinkGraph:
    """Load a TSV edge list ``src \\t dst \\t weight``; nodes are implied by edges."""
    path = Path(path)
    edges: list[tuple[str, str, int]] = []
    nodes: list[str] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise GraphFormatError(f"{path}:{lineno}: expected 3 columns, got {len(cols)}")
            src, dst, weight_s = cols
            try:
                weight = int(weight_s)
            except ValueError as exc:
                raise GraphFormatError(f"{path}:{lineno}: bad weight {weight_s!r}") from exc
            for node in (src, dst):
                if node not in seen:
                    seen.add(node)
                    nodes.append(node)
            edges.append((src, dst, weight))
    return LinkGraph(nodes=nodes, edges=edges)


class PoincareConfig(BaseModel):
    """Training hyperparameters for the entity embedding."""

    dim: int = 16
    epochs: int = 50
    learning_rate: float = 0.3
    negatives: int = 10  # negative samples per edge
    seed: int = 0
    max_norm: float = 1.0 - 1e-5
    burn_in_frac: float = 0.1  # fraction of epochs at reduced learning rate
    burn_in_scale: float = 0.1
    init_radius: float = 1e-3
    shards: int = 1  # >1: per-epoch edge shards with deltas applied in shard order
    check_invariants: bool = False  # assert ball constraint after every step


@dataclass
class PoincareEmbedding:
    """Points strictly inside the open unit ball, keyed by entity id."""

    dim: int
    points: dict[str, np.ndarray]
    max_norm: float = 1.0 - 1e-5

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.points

    def get(self, entity_id: str) -> np.ndarray:
        return self.points[entity_id]


@dataclass
class EmbeddingTrainResult:
    embedding: PoincareEmbedding
    epoch_losses: list[float]


def _check_in_ball(x: np.ndarray, name: str) -> None:
    sq = np.sum(np.square(x), axis=-1)
    if np.any(sq >= 1.0):
        raise ValueError(f"{name} must lie strictly inside the unit ball (|x| < 1)")


def poincare_distance(u: np.ndarray, v: np.ndarray) -> np.ndarray | float:
    """Hyperbolic distance between ball points; accepts (dim,) or (n, dim) inputs."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_in_ball(u, "u")
    _check_in_ball(v, "v")
    alpha = 1.0 - np.sum(np.square(u), axis=-1)
    beta = 1.0 - np.sum(np.square(v), axis=-1)
    delta = np.sum(np.square(u - v), axis=-1)
    gamma = 1.0 + 2.0 * delta / (alpha * beta)
    out = np.arccosh(gamma)
    return float(out) if out.ndim == 0 else out


def poincare_distance_grad(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean gradients (d d/d u, d d/d v) of the distance, elementwise over rows.

    Undefined at u == v; the arcosh slope is clamped there to keep training
    finite when coincident points appear.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    alpha = 1.0 - np.sum(np.square(u), axis=-1, keepdims=True)
    beta = 1.0 - np.sum(np.square(v), axis=-1, keepdims=True)
    delta = np.sum(np.square(u - v), axis=-1, keepdims=True)
    gamma = 1.0 + 2.0 * delta / (alpha * beta)
    denom = np.maximum(np.sqrt(np.square(gamma) - 1.0), _EPS)
    dg_du = 4.0 * (u - v) / (alpha * beta) + 4.0 * delta * u / (np.square(alpha) * beta)
    dg_dv = 4.0 * (v - u) / (alpha * beta) + 4.0 * delta * v / (np.square(beta) * alpha)
    return dg_du / denom, dg_dv / denom


def project_to_ball(x: np.ndarray, max_norm: float) -> np.ndarray:
    """Rescale rows whose norm exceeds max_norm back onto that radius."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    scale = np.where(norms > max_norm, max_norm / np.maximum(norms, _EPS), 1.0)
    return x * scale


def riemannian_scale(points: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Scale a Euclidean gradient by the inverse Poincare metric, ((1-|p|^2)^2)/4."""
    alpha = 1.0 - np.sum(np.square(points), axis=-1, keepdims=True)
    return grad * np.square(alpha) / 4.0


def _init_points(n: int, dim: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample inside the ball of the given radius."""
    dirs = rng.standard_normal((n, dim))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), _EPS)
    radii = radius * rng.random((n, 1)) ** (1.0 / dim)
    return dirs * radii


def _sample_negatives(n_nodes: int, exclude: tuple[int, int], count: int, rng: np.random.Generator) -> np.ndarray:
    neg = rng.integers(0, n_nodes, size=count)
    for i in range(count):
        while neg[i] == exclude[0] or neg[i] == exclude[1]:
            neg[i] = rng.integers(0, n_nodes)
    return neg


def _edge_step(
    points: np.ndarray,
    a: int,
    b: int,
    weight: int,
    lr: float,
    negatives: int,
    max_norm: float,
    rng: np.random.Generator,
) -> float:
    """One SGD step on a single edge; returns the (weighted) edge loss."""
    n_nodes = points.shape[0]
    if n_nodes < 3:
        negatives = 0  # no node outside {a, b} to draw from
    neg = _sample_negatives(n_nodes, (a, b), negatives, rng)
    targets = np.concatenate(([b], neg))
    u = points[a]
    vs = points[targets]
    dists = poincare_distance(u[None, :], vs)
    # L = d(a,b) + logsumexp(-d); softmax weights give the pull/push mix
    shifted = -dists - np.max(-dists)
    expd = np.exp(shifted)
    probs = expd / np.sum(expd)
    loss = float(dists[0] + np.log(np.sum(expd)) + np.max(-dists))
    coef = -probs
    coef[0] += 1.0  # positive target keeps (1 - p_b)
    coef *= weight
    grad_u_rows, grad_v_rows = poincare_distance_grad(np.broadcast_to(u, vs.shape), vs)
    grad_u = coef @ grad_u_rows
    points[a] = points[a] - lr * riemannian_scale(points[a], grad_u)
    # accumulate per unique target so repeated negatives update once
    updates: dict[int, np.ndarray] = {}
    for j, idx in enumerate(targets):
        g = coef[j] * grad_v_rows[j]
        if idx in updates:
            updates[idx] = updates[idx] + g
        else:
            updates[idx] = g
    for idx, g in updates.items():
        points[idx] = points[idx] - lr * riemannian_scale(points[idx], g)
    touched = np.concatenate(([a], list(updates.keys())))
    points[touched] = project_to_ball(points[touched], max_norm)
    return weight * loss


def train_embeddings(graph: LinkGraph, config: PoincareConfig) -> EmbeddingTrainResult:
    """Train ball embeddings on the link graph; deterministic for a fixed seed."""
    if not graph.nodes or not graph.edges:
        raise ValueError("graph must have at least one node and one edge")
    if config.learning_rate <= 0:
        raise ValueError(f"learning rate must be positive, got {config.learning_rate}")
    rng = np.random.default_rng(config.seed)
    n = len(graph.nodes)
    node_index = {node: i for i, node in enumerate(graph.nodes)}
    points = _init_points(n, config.dim, config.init_radius, rng)
    edges = [(node_index[s], node_index[d], w) for s, d, w in graph.edges]

    burn_in_epochs = int(config.burn_in_frac * config.epochs)
    epoch_losses: list[float] = []
    for epoch in range(config.epochs):
        lr = config.learning_rate * (config.burn_in_scale if epoch < burn_in_epochs else 1.0)
        order = rng.permutation(len(edges))
        total = 0.0
        if config.shards <= 1:
            for ei in order:
                a, b, w = edges[ei]
                total += _edge_step(points, a, b, w, lr, config.negatives, config.max_norm, rng)
        else:
            # each shard works from the epoch-start snapshot; deltas are applied
            # afterwards in shard order, so the result depends only on (seed, shards)
            snapshot = points.copy()
            chunks = np.array_split(order, config.shards)
            deltas = []
            for chunk in chunks:
                local = snapshot.copy()
                for ei in chunk:
                    a, b, w = edges[ei]
                    total += _edge_step(local, a, b, w, lr, config.negatives, config.max_norm, rng)
                deltas.append(local - snapshot)
            for delta in deltas:
                points += delta
            points = project_to_ball(points, config.max_norm)
        if not np.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss {total} at epoch {epoch} (lr={lr}, edges={len(edges)})"
            )
        if config.check_invariants:
            norms = np.linalg.norm(points, axis=1)
            assert np.all(norms <= config.max_norm + 1e-12), "ball constraint violated"
        epoch_losses.append(total)
    emb = PoincareEmbedding(
        dim=config.dim,
        points={node: points[i].copy() for node, i in node_index.items()},
        max_norm=config.max_norm,
    )
    return EmbeddingTrainResult(embedding=emb, epoch_losses=epoch_losses)


def export_embeddings(emb: PoincareEmbedding, path: str | Path) -> None:
    """Write ids, dim, and float32 coordinates; round-trips bit-exactly at f32."""
    store = VectorStore(emb.dim)
    for entity_id, point in emb.points.items():
        store.put(entity_id, point)
    write_store(store, path)


def import_embeddings(path: str | Path) -> PoincareEmbedding:
    store = read_store(path)
    points: dict[str, np.ndarray] = {}
    for key, vec in store.items():
        p = vec.astype(np.float64)
        if np.linalg.norm(p) >= 1.0:
            raise ValueError(f"{path}: point {key!r} lies outside the open unit ball")
        points[key] = p
    return PoincareEmbedding(dim=store.dim, points=points)
