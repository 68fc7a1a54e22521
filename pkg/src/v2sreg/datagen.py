"""Synthetic brain-shift dataset generation.

Seeded deformation sampling, partial-surface extraction at controlled
visibility ratios, surface noise augmentation, procedural synthetic-brain
meshes, binary sample files and the dataset manifest.
"""

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import deform
from .deform import (BulgeParams, DeformParams, SlideParams, TwistParams,
                     WarpParams, apply_deformation, taubin_smooth)
from .errors import FormatError, InvalidInput
from .geom import Aabb, TriangleMesh, aabb, as_points, compute_vertex_normals, knn
from .kernels import grow_patch_kernel
from .geom import farthest_point_sample

SAMPLE_MAGIC = b"V2SS"
SAMPLE_VERSION = 1

# default desk-scale point budgets; full-scale runs raise these via config
DEFAULT_PREOP_BUDGET = 2048
DEFAULT_SURF_BUDGET = 1024

VISIBILITY_RATIOS = (0.25, 0.35, 0.45, 0.55, 0.65)

# parameter sampling ranges (mm / rad); tuned so corpus initial misalignment
# lands in the 4-12 mm band
BULGE_MAGNITUDE = (2.0, 10.0)
BULGE_RADIUS = (10.0, 40.0)
SLIDE_WIDTH = (5.0, 30.0)
SLIDE_SHIFT = (1.0, 8.0)
TWIST_ANGLE = (0.05, 0.3)
TWIST_RADIUS = (20.0, 60.0)
WARP_AMPLITUDE = (0.5, 4.0)
WARP_FREQ = (0.01, 0.08)


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary string/int parts (blake2b, not hash())."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def _rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))


def _unit_vector(rng) -> np.ndarray:
    v = rng.standard_normal(3)
    n = np.linalg.norm(v)
    while n < 1e-12:  # pragma: no cover - essentially impossible
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
    v = v / n
    return v / np.linalg.norm(v)


def sample_params(case_id, mode, variation, box: Aabb) -> DeformParams:
    """Deterministic deformation parameters for one (case, mode, variation) triple.

    The seed derives from the triple alone, so regeneration never depends on
    call order. Global mode populates only the warp.
    """
    if mode not in ("global", "composite"):
        raise InvalidInput(f"unknown mode {mode!r}")
    rng = _rng("params", case_id, mode, variation)

    warp = WarpParams(
        amplitude=rng.uniform(*WARP_AMPLITUDE),
        freq=tuple(rng.uniform(*WARP_FREQ, size=3)),
        phase=tuple(rng.uniform(0.0, 2.0 * np.pi, size=3)),
    )
    if mode == "global":
        return DeformParams(mode="global", warp=warp).validate()

    bulge = BulgeParams(
        center=tuple(rng.uniform(box.min, box.max)),
        radius=rng.uniform(*BULGE_RADIUS),
        magnitude=rng.uniform(*BULGE_MAGNITUDE),
    )
    slide = SlideParams(
        plane_point=tuple(rng.uniform(box.min, box.max)),
        plane_normal=tuple(_unit_vector(rng)),
        width=rng.uniform(*SLIDE_WIDTH),
        delta=tuple(rng.uniform(*SLIDE_SHIFT) * _unit_vector(rng)),
    )
    twist = TwistParams(
        axis_point=tuple(box.center),
        axis_dir=tuple(_unit_vector(rng)),
        max_angle=rng.uniform(*TWIST_ANGLE),
        decay_radius=rng.uniform(*TWIST_RADIUS),
    )
    return DeformParams(mode="composite", bulge=bulge, slide=slide,
                        twist=twist, warp=warp).validate()


def generate_sample(preop_mesh: TriangleMesh, mode, variation, smoothing,
                    case_id="case0"):
    """Apply the seeded deformation (plus optional Taubin smoothing) to a mesh.

    Returns ``(deformed_mesh, phi)`` where phi maps the original vertices to
    their final (post-smoothing) positions.
    """
    mesh = preop_mesh
    if mesh.normals is None:
        normals, _ = compute_vertex_normals(mesh.vertices, mesh.faces)
    else:
        normals = mesh.normals
    params = sample_params(case_id, mode, variation, aabb(mesh.vertices))
    deformed = apply_deformation(mesh.vertices, normals, params)
    out = TriangleMesh(vertices=deformed, faces=np.array(mesh.faces, dtype=np.int64))
    if smoothing:
        out = taubin_smooth(out)
    phi = out.vertices - mesh.vertices
    return out, phi


# ---------------------------------------------------------------------------
# partial surface extraction
# ---------------------------------------------------------------------------

def patch_growth_order(points, seed):
    """Full greedy accretion order over a surface cloud, seeded start point.

    Growth repeatedly adds the unselected point nearest (Euclidean) to the
    current patch; prefixes of the order are themselves valid patches, which
    makes patches at increasing visibility ratios nested by construction.
    """
    pts = as_points(points)
    start = int(_rng("patch", seed).integers(len(pts)))
    return grow_patch_kernel(pts, start, len(pts))


def extract_partial_surface(I, surface_mask, ratio, seed):
    """Connected patch covering ``ceil(ratio * |surface|)`` deformed surface points."""
    cloud = as_points(I, "I")
    mask = np.asarray(surface_mask, dtype=np.int64)
    if mask.size == 0:
        raise InvalidInput("surface mask is empty")
    if not 0.0 < ratio <= 1.0:
        raise InvalidInput(f"visibility ratio {ratio} outside (0, 1]")
    count = math.ceil(ratio * mask.size)
    order = patch_growth_order(cloud[mask], seed)
    return cloud[mask][order[:count]]


# ---------------------------------------------------------------------------
# noise augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseParams:
    """Composite surface noise: Gaussian jitter plus a coherent control-grid field."""

    sigma_mm: float = 0.0
    a_mm: float = 0.0
    grid_res: int = 4
    k: int = 4

    def validate(self):
        if self.sigma_mm < 0 or self.a_mm < 0:
            raise InvalidInput("noise magnitudes must be nonnegative")
        if self.grid_res < 2 or self.k < 1:
            raise InvalidInput("grid_res must be >= 2 and k >= 1")
        if self.k > self.grid_res ** 3:
            raise InvalidInput("k exceeds control point count")
        return self


def control_grid(res):
    """Regular res^3 control lattice over the normalized cube [-1, 1]^3."""
    axis = np.linspace(-1.0, 1.0, res)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def augment_noise(S, params: NoiseParams, V, seed):
    """Perturb a partial surface in the normalized frame of the volume cloud V.

    Jitter sigma and field magnitude are specified in millimetres and divided
    by the normalization scale, so the perturbation is scale-free internally
    but metric in effect. Zero settings return the input bitwise unchanged.
    """
    params.validate()
    surf = as_points(S, "S")
    if params.sigma_mm == 0.0 and params.a_mm == 0.0:
        return surf.copy()

    vol = as_points(V, "V")
    center = vol.mean(axis=0)
    scale = float(np.linalg.norm(vol - center, axis=1).max())
    if scale <= 0.0:
        raise InvalidInput("normalization cloud V is degenerate (zero radius)")
    eps = 1e-8
    sigma_n = params.sigma_mm / (scale + eps)
    a_n = params.a_mm / (scale + eps)

    rng = _rng("noise", seed)
    s_norm = (surf - center) / scale
    jittered = s_norm + rng.normal(0.0, sigma_n, size=surf.shape)

    grid = control_grid(params.grid_res)
    disp = a_n * rng.standard_normal(grid.shape)
    idx, dist = knn(s_norm, grid, params.k)
    w = 1.0 / np.maximum(dist, 1e-12)
    w /= w.sum(axis=1, keepdims=True)
    coherent = np.einsum("nk,nkc->nc", w, disp[idx])

    return (jittered + coherent) * scale + center


# ---------------------------------------------------------------------------
# procedural synthetic brain
# ---------------------------------------------------------------------------

def icosphere(subdivisions):
    """Unit icosphere (vertices, faces) by midpoint subdivision of an icosahedron."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)

    for _ in range(subdivisions):
        verts = list(verts)
        midpoint = {}

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                m = (verts[i] + verts[j]) / 2.0
                m /= np.linalg.norm(m)
                midpoint[key] = len(verts)
                verts.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(verts)
        faces = np.asarray(new_faces, dtype=np.int64)
    return verts, faces


def _ellipsoid(subdiv, semi_axes, center):
    v, f = icosphere(subdiv)
    return v * np.asarray(semi_axes) + np.asarray(center), f


def synthetic_brain(case_index):
    """Ellipsoid brain shell with an embedded tumor and two ventricle shells.

    Returns ``(mesh, surface_mask)``; the mask lists vertices of the outer
    brain component. Per-case jitter varies the semi-axes and tumor placement.
    """
    rng = _rng("synthetic-brain", case_index)
    jit = lambda lo, hi: rng.uniform(lo, hi)

    brain_axes = np.array([70.0, 85.0, 65.0]) * rng.uniform(0.9, 1.1, size=3)
    parts = [_ellipsoid(4, brain_axes, (0.0, 0.0, 0.0))]
    tumor_center = np.array([jit(20, 35), jit(-15, 15), jit(5, 25)])
    parts.append(_ellipsoid(3, np.array([12.0, 10.0, 14.0]) * jit(0.8, 1.3), tumor_center))
    for sign in (-1.0, 1.0):
        parts.append(_ellipsoid(3, (8.0, 25.0, 10.0), (sign * 13.0, jit(-8, 8), 0.0)))

    verts, faces, offset = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + offset)
        offset += len(v)
    mesh = TriangleMesh(vertices=np.concatenate(verts),
                        faces=np.concatenate(faces))
    mesh.normals, _ = compute_vertex_normals(mesh.vertices, mesh.faces)
    surface_mask = np.arange(len(parts[0][0]), dtype=np.int64)
    return mesh, surface_mask


def outer_surface_mask(mesh: TriangleMesh):
    """Vertices of the connected component with the largest bounding-box volume."""
    n = len(mesh.vertices)
    parent = np.arange(n)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b, c in np.asarray(mesh.faces):
        ra, rb, rc = find(a), find(b), find(c)
        parent[rb] = ra
        parent[rc] = ra
    labels = np.array([find(i) for i in range(n)])
    best, best_vol = None, -1.0
    for lab in np.unique(labels):
        pts = mesh.vertices[labels == lab]
        vol = float(np.prod(pts.max(axis=0) - pts.min(axis=0)))
        if vol > best_vol:
            best, best_vol = lab, vol
    return np.nonzero(labels == best)[0].astype(np.int64)


# ---------------------------------------------------------------------------
# sample records and on-disk format
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    """One training/eval record; arrays are float32 exactly as stored on disk."""

    P: np.ndarray
    I: np.ndarray
    S: np.ndarray
    Phi: np.ndarray
    meta: dict = field(default_factory=dict)

    def validate(self):
        if self.I.shape != self.P.shape or self.Phi.shape != self.P.shape:
            raise InvalidInput("P, I and Phi must be index-aligned")
        if not np.array_equal(self.Phi, self.I - self.P):
            raise InvalidInput("Phi must equal I - P exactly")
        return self


def write_sample(sample: Sample, path):
    sample.validate()
    n_p, n_s = len(sample.P), len(sample.S)
    meta_blob = json.dumps(sample.meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<HII", SAMPLE_VERSION, n_p, n_s))
        for arr in (sample.P, sample.I, sample.Phi):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sample.S, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)


def read_sample(path) -> Sample:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SAMPLE_MAGIC:
        raise FormatError("bad sample magic", offset=0)
    if len(blob) < 14:
        raise FormatError("truncated sample header", offset=len(blob))
    version, n_p, n_s = struct.unpack_from("<HII", blob, 4)
    if version != SAMPLE_VERSION:
        raise FormatError(f"unsupported sample version {version}", offset=4)
    pos = 14

    def take(count, what):
        nonlocal pos
        nbytes = count * 3 * 4
        if pos + nbytes > len(blob):
            raise FormatError(f"truncated {what} block", offset=pos)
        arr = np.frombuffer(blob, dtype="<f4", count=count * 3, offset=pos).reshape(count, 3)
        pos += nbytes
        return arr.copy()

    p = take(n_p, "P")
    i = take(n_p, "I")
    phi = take(n_p, "Phi")
    s = take(n_s, "S")
    if pos + 4 > len(blob):
        raise FormatError("truncated meta length", offset=pos)
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if pos + meta_len > len(blob):
        raise FormatError("truncated meta blob", offset=pos)
    try:
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("malformed meta JSON", offset=pos)
    return Sample(P=p, I=i, S=s, Phi=phi, meta=meta).validate()


# ---------------------------------------------------------------------------
# dataset builder
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Sample records (relative paths, meta, split labels) plus the global seed."""

    global_seed: int
    samples: list = field(default_factory=list)

    def split(self, name):
        return [rec for rec in self.samples if rec["split"] == name]

    def to_json(self):
        return json.dumps({"global_seed": self.global_seed, "samples": self.samples},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(global_seed=doc["global_seed"], samples=doc["samples"])


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return DatasetManifest.from_json(fh.read())


def assign_splits(n, global_seed):
    """Disjoint exhaustive 70/15/15 split labels for n samples."""
    order = _rng("split", global_seed).permutation(n)
    n_train = round(0.70 * n)
    n_val = round(0.15 * n)
    labels = np.empty(n, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train:n_train + n_val]] = "val"
    labels[order[n_train + n_val:]] = "test"
    return labels


def make_sample(case_id, mesh, surface_mask, mode, variation, ratio, *,
                global_seed, preop_budget=DEFAULT_PREOP_BUDGET,
                surf_budget=DEFAULT_SURF_BUDGET, smoothing=True,
                noise=NoiseParams(), generator_meta=None,
                _case_cache=None) -> Sample:
    """Generate one sample end to end (deform, budget, extract, optional noise)."""
    cache = _case_cache if _case_cache is not None else {}
    key = ("budget", case_id)
    if key not in cache:
        budget = min(preop_budget, len(mesh.vertices))
        sel = farthest_point_sample(mesh.vertices, budget, derive_seed("budget", global_seed, case_id))
        cache[key] = np.sort(sel)
    sel = cache[key]

    deformed, phi = generate_sample(mesh, mode, variation, smoothing, case_id=case_id)

    p64 = mesh.vertices[sel]
    i64 = deformed.vertices[sel]

    surf_set = set(surface_mask.tolist())
    budget_surface = np.nonzero(np.fromiter((v in surf_set for v in sel), bool, len(sel)))[0]
    patch_seed = derive_seed("patch", global_seed, case_id, mode, variation)
    s64 = extract_partial_surface(i64, budget_surface, ratio, patch_seed)
    if len(s64) > surf_budget:
        keep = farthest_point_sample(s64, surf_budget, patch_seed)
        s64 = s64[np.sort(keep)]

    noise_seed = derive_seed("noise", global_seed, case_id, mode, variation, ratio)
    s64 = augment_noise(s64, noise, p64, noise_seed)

    p32 = p64.astype(np.float32)
    i32 = i64.astype(np.float32)
    meta = {
        "case_id": case_id,
        "mode": mode,
        "variation": variation,
        "ratio": ratio,
        "global_seed": global_seed,
        "patch_seed": patch_seed,
        "noise_seed": noise_seed,
        "noise": {"sigma_mm": noise.sigma_mm, "a_mm": noise.a_mm,
                  "grid_res": noise.grid_res, "k": noise.k},
        "smoothing": bool(smoothing),
        "preop_budget": preop_budget,
        "surf_budget": surf_budget,
        "surface_count": int(budget_surface.size),
        "generator": generator_meta or {},
    }
    return Sample(P=p32, I=i32, S=s64.astype(np.float32), Phi=i32 - p32,
                  meta=meta).validate()


def build_dataset(cases, variations_per_case, modes, ratios, out_dir, *,
                  global_seed=0, preop_budget=DEFAULT_PREOP_BUDGET,
                  surf_budget=DEFAULT_SURF_BUDGET, smoothing=True,
                  noise=NoiseParams(), progress=None) -> DatasetManifest:
    """Write every sample plus ``manifest.json`` under ``out_dir``.

    ``cases`` is a list of ``(case_id, mesh, surface_mask, generator_meta)``.
    Sample count = len(cases) * variations * len(modes) * len(ratios).
    """
    if not cases:
        raise InvalidInput("need at least one case")
    from pathlib import Path
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)

    records = []
    cache = {}
    for case_id, mesh, surface_mask, gen_meta in cases:
        if mesh.normals is None:
            mesh.normals, _ = compute_vertex_normals(mesh.vertices, mesh.faces)
        for mode in modes:
            for variation in range(variations_per_case):
                for ratio in ratios:
                    sample = make_sample(
                        case_id, mesh, surface_mask, mode, variation, ratio,
                        global_seed=global_seed, preop_budget=preop_budget,
                        surf_budget=surf_budget, smoothing=smoothing,
                        noise=noise, generator_meta=gen_meta, _case_cache=cache)
                    rel = f"samples/{case_id}_{mode}_v{variation:04d}_r{int(round(ratio * 100)):03d}.v2ss"
                    write_sample(sample, out / rel)
                    records.append({"path": rel, "meta": sample.meta})
                    if progress:
                        progress(rel)

    labels = assign_splits(len(records), global_seed)
    for rec, lab in zip(records, labels):
        rec["split"] = str(lab)
    manifest = DatasetManifest(global_seed=global_seed, samples=records)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json())
    return manifest
