"""Analytic deformation operators used to synthesize ground-truth brain-shift fields.

Four vertex-wise operators (bulge, slide, twist, sinusoidal warp), their
ordered composition, Taubin mesh smoothing and displacement-field extraction.
All operators preserve point count and ordering and run in float64.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .geom import TriangleMesh, as_points

# canonical pass-band Taubin settings
TAUBIN_LAMBDA = 0.5
TAUBIN_MU = -0.53
TAUBIN_ITERATIONS = 10


def _check_unit(vec, name):
    v = np.asarray(vec, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise InvalidInput(f"{name} must be a unit vector")
    return v


@dataclass(frozen=True)
class BulgeParams:
    """Gaussian bump of magnitude ``s`` (mm) and radius ``r`` (mm) centred at ``center``."""

    center: tuple
    radius: float
    magnitude: float

    def validate(self):
        if not self.radius > 0:
            raise InvalidInput("bulge radius must be positive")
        if abs(self.magnitude) > 50.0:
            raise InvalidInput("bulge magnitude outside sanity bound (50 mm)")
        return self


@dataclass(frozen=True)
class SlideParams:
    """Plane-gated translation: full shift ``delta`` behind the plane, Gaussian falloff ahead."""

    plane_point: tuple
    plane_normal: tuple
    width: float
    delta: tuple

    def validate(self):
        _check_unit(self.plane_normal, "slide plane normal")
        if not self.width > 0:
            raise InvalidInput("slide transition width must be positive")
        return self


@dataclass(frozen=True)
class TwistParams:
    """Rotation about an axis whose angle decays with radial distance."""

    axis_point: tuple
    axis_dir: tuple
    max_angle: float
    decay_radius: float

    def validate(self):
        _check_unit(self.axis_dir, "twist axis direction")
        if not self.decay_radius > 0:
            raise InvalidInput("twist decay radius must be positive")
        if abs(self.max_angle) > np.pi / 2:
            raise InvalidInput("twist angle outside sanity bound (pi/2)")
        return self


@dataclass(frozen=True)
class WarpParams:
    """Sinusoidal global displacement with cyclic coordinate coupling."""

    amplitude: float
    freq: tuple  # (f_x, f_y, f_z), rad/mm
    phase: tuple  # (phi_x, phi_y, phi_z), rad

    def validate(self):
        if self.amplitude < 0:
            raise InvalidInput("warp amplitude must be nonnegative")
        return self


IDENTITY_BULGE = BulgeParams(center=(0.0, 0.0, 0.0), radius=1.0, magnitude=0.0)
IDENTITY_SLIDE = SlideParams(plane_point=(0.0, 0.0, 0.0), plane_normal=(0.0, 0.0, 1.0),
                             width=1.0, delta=(0.0, 0.0, 0.0))
IDENTITY_TWIST = TwistParams(axis_point=(0.0, 0.0, 0.0), axis_dir=(0.0, 0.0, 1.0),
                             max_angle=0.0, decay_radius=1.0)
IDENTITY_WARP = WarpParams(amplitude=0.0, freq=(0.0, 0.0, 0.0), phase=(0.0, 0.0, 0.0))


@dataclass(frozen=True)
class DeformParams:
    """Tagged bundle for one synthetic deformation; ``mode`` is 'global' or 'composite'."""

    mode: str
    bulge: BulgeParams = IDENTITY_BULGE
    slide: SlideParams = IDENTITY_SLIDE
    twist: TwistParams = IDENTITY_TWIST
    warp: WarpParams = IDENTITY_WARP

    def validate(self):
        if self.mode not in ("global", "composite"):
            raise InvalidInput(f"unknown deformation mode {self.mode!r}")
        self.bulge.validate()
        self.slide.validate()
        self.twist.validate()
        self.warp.validate()
        return self


def bulge(vertices, normals, params: BulgeParams):
    """Move each vertex along its own normal by a Gaussian of distance to the center."""
    params.validate()
    v = as_points(vertices)
    n = np.asarray(normals, dtype=np.float64)
    if n.shape != v.shape:
        raise InvalidInput("normals must align 1:1 with vertices")
    c = np.asarray(params.center, dtype=np.float64)
    d = np.linalg.norm(v - c, axis=1)
    amp = params.magnitude * np.exp(-((d / params.radius) ** 2))
    return v + amp[:, None] * n


def slide(vertices, params: SlideParams):
    """Plane-gated translation; full shift for signed distance <= 0."""
    params.validate()
    v = as_points(vertices)
    p = np.asarray(params.plane_point, dtype=np.float64)
    nhat = np.asarray(params.plane_normal, dtype=np.float64)
    d = (v - p) @ nhat
    gate = np.exp(-((np.maximum(0.0, d) / params.width) ** 2))
    return v + gate[:, None] * np.asarray(params.delta, dtype=np.float64)


def twist(vertices, params: TwistParams):
    """Rotate each vertex about the axis by an angle decaying with radial distance.

    The axis-parallel component is untouched; only the orthogonal component
    rotates (Rodrigues formula with a per-vertex angle).
    """
    params.validate()
    v = as_points(vertices)
    if params.max_angle == 0.0:
        return v.copy()
    a = np.asarray(params.axis_point, dtype=np.float64)
    u = np.asarray(params.axis_dir, dtype=np.float64)
    rel = v - a
    parallel = np.outer(rel @ u, u)
    r_perp = rel - parallel
    r = np.linalg.norm(r_perp, axis=1)
    theta = params.max_angle * np.exp(-((r / params.decay_radius) ** 2))
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    rotated = r_perp * c + np.cross(np.broadcast_to(u, r_perp.shape), r_perp) * s
    return a + parallel + rotated


def warp(vertices, params: WarpParams):
    """Sinusoidal displacement; dx depends on y, dy on z, dz on x."""
    params.validate()
    v = as_points(vertices)
    a = params.amplitude
    fx, fy, fz = params.freq
    px, py, pz = params.phase
    disp = np.stack([
        a * np.sin(fx * v[:, 1] + px),
        a * np.sin(fy * v[:, 2] + py),
        a * np.sin(fz * v[:, 0] + pz),
    ], axis=1)
    return v + disp


def composite(vertices, normals, params: DeformParams):
    """Ordered composition: bulge, then slide, then twist, then warp.

    Normals feeding the bulge come from the undeformed mesh and are not
    recomputed between stages.
    """
    params.validate()
    if params.mode != "composite":
        raise InvalidInput("composite requires params.mode == 'composite'")
    v = bulge(vertices, normals, params.bulge)
    v = slide(v, params.slide)
    v = twist(v, params.twist)
    v = warp(v, params.warp)
    return v


def apply_deformation(vertices, normals, params: DeformParams):
    """Dispatch on mode: 'global' applies only the warp, 'composite' the full chain."""
    params.validate()
    if params.mode == "global":
        return warp(vertices, params.warp)
    return composite(vertices, normals, params)


def vertex_adjacency(n_vertices, faces):
    """CSR-style 1-ring adjacency (offsets, neighbor list) from triangle faces."""
    faces = np.asarray(faces, dtype=np.int64)
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.concatenate([edges, edges[:, ::-1]])
    edges = np.unique(edges, axis=0)
    offsets = np.zeros(n_vertices + 1, dtype=np.int64)
    np.add.at(offsets, edges[:, 0] + 1, 1)
    np.cumsum(offsets, out=offsets)
    return offsets, edges[:, 1].copy()


def taubin_smooth(mesh: TriangleMesh, lam=TAUBIN_LAMBDA, mu=TAUBIN_MU,
                  iterations=TAUBIN_ITERATIONS) -> TriangleMesh:
    """Two-step lambda/mu Laplacian smoothing with uniform umbrella weights.

    Vertices without neighbors stay fixed and are counted in the returned
    mesh's ``diagnostics['isolated_vertices']``. Topology is unchanged.
    """
    if not (lam > 0 > mu):
        raise InvalidInput("taubin_smooth requires lambda > 0 > mu")
    if iterations < 0:
        raise InvalidInput("iterations must be >= 0")
    verts = as_points(mesh.vertices).copy()
    offsets, nbrs = vertex_adjacency(len(verts), mesh.faces)
    degree = np.diff(offsets)
    isolated = degree == 0
    active = ~isolated
    deg = np.maximum(degree, 1).astype(np.float64)
    row = np.repeat(np.arange(len(verts)), degree)

    def umbrella(v):
        acc = np.zeros_like(v)
        np.add.at(acc, row, v[nbrs])
        return acc / deg[:, None] - v

    for _ in range(int(iterations)):
        for step in (lam, mu):
            lap = umbrella(verts)
            verts[active] += step * lap[active]

    out = TriangleMesh(vertices=verts, faces=mesh.faces.copy(),
                       normals=None if mesh.normals is None else mesh.normals.copy())
    out.diagnostics["isolated_vertices"] = int(isolated.sum())
    return out


def displacement_field(original, deformed):
    """Per-point displacement ``deformed - original`` for index-aligned clouds."""
    a = as_points(original, "original")
    b = as_points(deformed, "deformed")
    if a.shape != b.shape:
        raise InvalidInput("clouds must have equal point counts")
    return b - a
