"""Uniform-weight Laplacian smoothing and the low/high frequency split.

Smoothing runs the diffusion update g <- g + lam * L(g) where L is the
umbrella operator (mean of one-ring neighbours minus the vertex), applied
synchronously so results never depend on vertex order.  The low frequency
part is the smoothed mesh and the high frequency part the residual, hence
reconstruction is exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix


class TopologyError(ValueError):
    """Mesh topology unfit for smoothing (isolated vertex)."""


@dataclass(frozen=True)
class FrequencySplit:
    low: np.ndarray   # (m, 3) smoothed shape
    high: np.ndarray  # (m, 3) residual detail
    lam: float
    iterations: int

    @property
    def reconstruction(self):
        return self.low + self.high


def adjacency_matrix(n_vertices, faces):
    """Row-normalized one-ring averaging matrix (isolated rows rejected)."""
    faces = np.asarray(faces, dtype=np.int64)
    pairs = np.concatenate(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]
    )
    pairs = np.unique(
        np.sort(np.concatenate([pairs, pairs[:, ::-1]]), axis=1), axis=0
    )
    both = np.concatenate([pairs, pairs[:, ::-1]])
    A = coo_matrix(
        (np.ones(len(both)), (both[:, 0], both[:, 1])),
        shape=(n_vertices, n_vertices),
    ).tocsr()
    degree = np.asarray(A.sum(axis=1)).ravel()
    if np.any(degree == 0):
        lonely = int(np.nonzero(degree == 0)[0][0])
        raise TopologyError(f"vertex {lonely} has no neighbours")
    inv = 1.0 / degree
    return A.multiply(inv[:, None]).tocsr()


def laplacian(faces, vertices, index):
    """Umbrella Laplacian at one vertex: one-ring mean minus the vertex."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    touching = faces[np.any(faces == index, axis=1)]
    neighbours = np.unique(touching[touching != index])
    if neighbours.size == 0:
        raise TopologyError(f"vertex {index} has no neighbours")
    return vertices[neighbours].mean(axis=0) - vertices[index]


def smooth(faces, vertices, lam=0.15, iterations=80):
    """Diffusion-flow smoothing with synchronous updates."""
    if not 0.0 < lam < 1.0:
        raise ValueError("lam must lie in (0, 1)")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    vertices = np.asarray(vertices, dtype=np.float64)
    if iterations == 0:
        return vertices.copy()
    A = adjacency_matrix(vertices.shape[0], faces)
    out = vertices
    for _ in range(iterations):
        out = out + lam * (A @ out - out)
    return out


def decompose(faces, vertices, lam=0.15, iterations=80):
    """Split a mesh into its smoothed shape and the detail residual."""
    vertices = np.asarray(vertices, dtype=np.float64)
    low = smooth(faces, vertices, lam, iterations)
    return FrequencySplit(
        low=low, high=vertices - low, lam=lam, iterations=iterations
    )


class Smoother:
    """Reusable smoothing operator for one fixed topology."""

    def __init__(self, n_vertices, faces, lam=0.15, iterations=80):
        if not 0.0 < lam < 1.0:
            raise ValueError("lam must lie in (0, 1)")
        self.A = adjacency_matrix(n_vertices, faces)
        self.lam = lam
        self.iterations = iterations

    def smooth(self, vertices):
        out = np.asarray(vertices, dtype=np.float64)
        for _ in range(self.iterations):
            out = out + self.lam * (self.A @ out - out)
        return out

    def decompose(self, vertices):
        vertices = np.asarray(vertices, dtype=np.float64)
        low = self.smooth(vertices)
        return FrequencySplit(
            low=low,
            high=vertices - low,
            lam=self.lam,
            iterations=self.iterations,
        )
