"""Geometry contrastive loss over Gaussian positions.

A frozen, seeded edge-convolution extractor embeds a point set:
``[x_i, x_j - x_i]`` over the kNN graph -> shared MLP -> max over neighbours
-> max over points -> projection head -> unit vector. Three clouds are
compared with a zero-margin hinge on Euclidean embedding distances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .deform import Mlp
from .rig import neighbor_graph

EMBED_DIM = 64
MAX_POINTS = 4096
GEO_FORMAT = "gsavatar-geo"


@dataclass
class GeoExtractor:
    knn_k: int
    edge_mlp: Mlp
    proj: Mlp

    @classmethod
    def create(cls, seed: int = 0, knn_k: int = 16, hidden: int = 64, dim: int = EMBED_DIM) -> "GeoExtractor":
        rng = np.random.default_rng(seed)
        edge = Mlp.init([6, hidden], ["relu"], rng)
        proj = Mlp.init([hidden, hidden, dim], ["relu", "none"], rng)
        return cls(knn_k, edge, proj)

    def save(self, path) -> None:
        """Write the frozen weights as a checkpoint file."""
        from .toolkit.io import save_checkpoint

        tensors = {}
        for prefix, net in (("edge", self.edge_mlp), ("proj", self.proj)):
            for i, (W, b) in enumerate(zip(net.weights, net.biases)):
                tensors[f"{prefix}.W{i}"], tensors[f"{prefix}.b{i}"] = W, b
        save_checkpoint(path, tensors, {"format": GEO_FORMAT, "knn_k": self.knn_k})

    @classmethod
    def load(cls, path) -> "GeoExtractor":
        from .toolkit.io import DataError, load_checkpoint

        header, t = load_checkpoint(path)
        if header.get("format") != GEO_FORMAT:
            raise DataError(f"{path}: not an extractor weights file")

        def net(prefix, acts):
            n = len(acts)
            return Mlp([t[f"{prefix}.W{i}"] for i in range(n)], [t[f"{prefix}.b{i}"] for i in range(n)], acts)

        try:
            return cls(int(header["knn_k"]), net("edge", ["relu"]), net("proj", ["relu", "none"]))
        except KeyError as e:
            raise DataError(f"{path}: missing extractor tensor {e}") from e


@numba.njit(parallel=True, cache=True)
def _max_gather(B, nbr):
    """``out[i, c] = max_k B[nbr[i, k], c]`` and the arg-max ``k`` (first maximum wins)."""
    n, k = nbr.shape
    c = B.shape[1]
    out = np.empty((n, c))
    arg = np.empty((n, c), dtype=np.int64)
    for i in numba.prange(n):
        for ch in range(c):
            best = B[nbr[i, 0], ch]
            bj = 0
            for j in range(1, k):
                v = B[nbr[i, j], ch]
                if v > best:
                    best = v
                    bj = j
            out[i, ch] = best
            arg[i, ch] = bj
    return out, arg


def subsample_indices(n: int, limit: int = MAX_POINTS) -> np.ndarray:
    """Deterministic stratified subsample: one index per equal-width stratum."""
    if n <= limit:
        return np.arange(n)
    return (np.arange(limit) * n) // limit


def embed_forward(positions: np.ndarray, ex: GeoExtractor, neighbors: np.ndarray | None = None):
    """Embedding plus the cache for :func:`embed_backward`.

    The edge layer is affine in ``[x_i, x_j - x_i]``, so its pre-activation
    splits into ``A_i + B_j`` and, relu being monotone, the max over
    neighbours is ``relu(A_i + max_j B_j)``: no per-edge tensor is built.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if n < ex.knn_k + 1:
        raise ValueError(f"need at least {ex.knn_k + 1} points, got {n}")
    if len(ex.edge_mlp.weights) != 1 or ex.edge_mlp.activations[0] != "relu":
        raise ValueError("edge function must be a single relu layer")
    nbr = neighbor_graph(positions, ex.knn_k) if neighbors is None else neighbors
    W, b = ex.edge_mlp.weights[0], ex.edge_mlp.biases[0]
    Wa, Wb = W[:, :3], W[:, 3:]
    A = positions @ (Wa - Wb).T + b
    B = positions @ Wb.T
    Bmax, arg_k = _max_gather(np.ascontiguousarray(B), np.ascontiguousarray(nbr, dtype=np.int64))
    pre = A + Bmax
    pooled = np.maximum(pre, 0.0)
    arg_n = pooled.argmax(axis=0)
    ch = np.arange(pooled.shape[1])
    glob = pooled[arg_n, ch]
    f, proj_cache = ex.proj.forward(glob[None])
    f = f[0]
    norm = np.linalg.norm(f)
    cache = dict(nbr=nbr, arg_k=arg_k, arg_n=arg_n, pre=pre[arg_n, ch], proj_cache=proj_cache,
                 f=f, norm=norm, n=n)
    return f / norm, cache


def embed(positions: np.ndarray, ex: GeoExtractor) -> np.ndarray:
    """Unit embedding of a point set."""
    return embed_forward(positions, ex)[0]


def embed_backward(cache: dict, ex: GeoExtractor, g_emb: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. positions; the kNN graph and max routing are held fixed."""
    f, norm = cache["f"], cache["norm"]
    u = f / norm
    g_f = (g_emb - u * (u @ g_emb)) / norm
    g_glob, _, _ = ex.proj.backward(cache["proj_cache"], g_f[None])
    g_pre = g_glob[0] * (cache["pre"] > 0)
    W = ex.edge_mlp.weights[0]
    Wa, Wb = W[:, :3], W[:, 3:]
    pts = cache["arg_n"]
    ch = np.arange(pts.shape[0])
    nb = cache["nbr"][pts, cache["arg_k"][pts, ch]]
    g_pos = np.zeros((cache["n"], 3))
    # each channel routes to one centre point (A term) and one neighbour (B term)
    np.add.at(g_pos, pts, g_pre[:, None] * (Wa - Wb))
    np.add.at(g_pos, nb, g_pre[:, None] * Wb)
    return g_pos


def contrastive_loss(f_o: np.ndarray, f_a: np.ndarray, f_op: np.ndarray) -> float:
    """``max(0, |f_a - f_o'| - |f_a - f_o|)``."""
    return contrastive_loss_and_grad(f_o, f_a, f_op)[0]


def contrastive_loss_and_grad(f_o, f_a, f_op):
    """Loss and gradients ``(d/f_o, d/f_a, d/f_op)``; zero subgradient at the kink."""
    d_pos_v = f_a - f_op
    d_neg_v = f_a - f_o
    d_pos = float(np.linalg.norm(d_pos_v))
    d_neg = float(np.linalg.norm(d_neg_v))
    loss = max(0.0, d_pos - d_neg)
    g_o = np.zeros_like(f_o)
    g_a = np.zeros_like(f_a)
    g_op = np.zeros_like(f_op)
    if loss > 0.0:
        u_pos = d_pos_v / d_pos
        g_a += u_pos
        g_op -= u_pos
        if d_neg > 0.0:
            u_neg = d_neg_v / d_neg
            g_a -= u_neg
            g_o += u_neg
    return loss, (g_o, g_a, g_op)
