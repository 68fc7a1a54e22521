"""Geometric primitives shared by the whole pipeline.

Point clouds are plain ``(N, 3)`` float64 arrays in millimetres; per-point
feature channels ride along as separate ``(N, C)`` arrays. All geometry runs
in 64-bit floats so that downstream ground-truth generation is oracle-exact.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput
from .kernels import fps_kernel, knn_kernel

# inverse-distance interpolation snaps to the nearest neighbor below this (mm)
SNAP_EPS = 1e-8


def as_points(arr, name="points"):
    """Validate and convert to a (N, 3) float64 cloud with N >= 1."""
    pts = np.asarray(arr, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInput(f"{name} must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise InvalidInput(f"{name} must contain at least one point")
    if not np.isfinite(pts).all():
        raise InvalidInput(f"{name} contains non-finite coordinates")
    return pts


@dataclass
class Aabb:
    """Axis-aligned bounding box in millimetres."""

    min: np.ndarray
    max: np.ndarray
    center: np.ndarray


@dataclass
class TriangleMesh:
    """Vertices (N,3) float64, faces (F,3) int64, optional unit vertex normals."""

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def validate(self):
        self.vertices = as_points(self.vertices, "vertices")
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise InvalidInput(f"faces must have shape (F, 3), got {self.faces.shape}")
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise InvalidInput("face index out of range")
        if self.faces.size and self.faces.min() < 0:
            raise InvalidInput("negative face index")
        if self.normals is not None:
            norms = np.linalg.norm(self.normals, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise InvalidInput("stored normals are not unit length")
        return self


def aabb(points) -> Aabb:
    """Component-wise bounding box and its center."""
    pts = as_points(points)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    return Aabb(min=lo, max=hi, center=(lo + hi) / 2.0)


def compute_vertex_normals(vertices, faces):
    """Area-weighted per-vertex unit normals.

    Returns ``(normals, n_fallback)`` where ``n_fallback`` counts vertices whose
    incident faces were all degenerate (they receive the (0, 0, 1) fallback).
    """
    verts = as_points(vertices, "vertices")
    faces = np.asarray(faces, dtype=np.int64)
    if faces.ndim != 2 or faces.shape[1] != 3 or faces.shape[0] < 1:
        raise InvalidInput("mesh must have at least one triangular face")
    if faces.max() >= len(verts):
        raise InvalidInput("face index out of range")

    v0 = verts[faces[:, 0]]
    v1 = verts[faces[:, 1]]
    v2 = verts[faces[:, 2]]
    # cross product magnitude is twice the face area, giving area weighting for free
    fn = np.cross(v1 - v0, v2 - v0)

    acc = np.zeros_like(verts)
    for c in range(3):
        np.add.at(acc, faces[:, c], fn)

    norms = np.linalg.norm(acc, axis=1)
    degenerate = norms <= 1e-30
    n_fallback = int(degenerate.sum())
    out = np.empty_like(acc)
    out[~degenerate] = acc[~degenerate] / norms[~degenerate, None]
    out[degenerate] = (0.0, 0.0, 1.0)
    return out, n_fallback


def farthest_point_sample(points, m, seed):
    """Greedy farthest point sampling; the start index is ``seed mod N``.

    Each subsequent pick maximizes the minimum distance to everything chosen
    so far, ties resolving to the lowest index.
    """
    pts = as_points(points)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise InvalidInput(f"sample count m={m} outside [1, {n}]")
    start = int(seed) % n
    return fps_kernel(pts, int(m), start)


def knn(query, reference, k):
    """Exact k nearest reference points per query, ascending by distance.

    Returns ``(indices, distances)`` with shapes (Nq, k); ties break to the
    lowest reference index.
    """
    q = as_points(query, "query")
    ref = as_points(reference, "reference")
    if not 1 <= k <= ref.shape[0]:
        raise InvalidInput(f"k={k} exceeds reference size {ref.shape[0]}")
    idx, d2 = knn_kernel(q, ref, int(k))
    return idx, np.sqrt(d2)


def three_nn_weights(coarse_points, fine_points):
    """3-NN indices and normalized inverse-distance weights for interpolation.

    If a fine point lies within SNAP_EPS of its nearest coarse point, that
    neighbor takes the full weight.
    """
    coarse = as_points(coarse_points, "coarse_points")
    if coarse.shape[0] < 3:
        raise InvalidInput("need at least 3 coarse points for 3-NN interpolation")
    idx, dist = knn(fine_points, coarse, 3)
    w = 1.0 / np.maximum(dist, SNAP_EPS)
    w /= w.sum(axis=1, keepdims=True)
    snap = dist[:, 0] < SNAP_EPS
    w[snap] = (1.0, 0.0, 0.0)
    return idx, w


def interpolate_3nn(coarse_points, coarse_features, fine_points):
    """Inverse-distance weighted 3-NN feature transfer onto fine points."""
    feats = np.asarray(coarse_features)
    if feats.ndim != 2 or feats.shape[1] < 1:
        raise InvalidInput("coarse_features must be (N, C) with C >= 1")
    if feats.shape[0] != np.asarray(coarse_points).shape[0]:
        raise InvalidInput("feature count does not match coarse point count")
    idx, w = three_nn_weights(coarse_points, fine_points)
    return np.einsum("nk,nkc->nc", w, feats[idx])


def rodrigues_rotate(v, axis_point, axis_dir, angle):
    """Rotate point(s) ``v`` about the line (axis_point, axis_dir) by ``angle`` rad."""
    u = np.asarray(axis_dir, dtype=np.float64)
    if abs(np.linalg.norm(u) - 1.0) > 1e-6:
        raise InvalidInput("axis_dir must be a unit vector")
    a = np.asarray(axis_point, dtype=np.float64)
    pts = np.asarray(v, dtype=np.float64)
    single = pts.ndim == 1
    w = np.atleast_2d(pts) - a
    c, s = np.cos(angle), np.sin(angle)
    rot = w * c + np.cross(u, w) * s + np.outer(w @ u, u) * (1.0 - c)
    out = rot + a
    return out[0] if single else out
