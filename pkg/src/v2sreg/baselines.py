"""Classical registration baselines: rigid ICP and non-rigid coherent point drift.

Both are deterministic given inputs and configuration. The evaluation adapter
registers the pre-operative cloud to the observed surface and extends the
resulting displacement to every pre-operative point by 3-NN inverse-distance
interpolation, so the baselines produce volumetric fields comparable with the
network's output.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, SingularFit
from .geom import as_points, farthest_point_sample, interpolate_3nn, knn

ICP_MAX_ITERS = 100
ICP_TOL = 1e-6
CPD_MAX_SOURCE_POINTS = 512


@dataclass
class RigidTransform:
    """Proper rigid motion x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass
class IcpResult:
    transform: RigidTransform
    residual: float  # final mean closest-point distance (mm)
    history: list = field(default_factory=list)  # per-iteration RMS objective
    iterations: int = 0


def best_rigid_fit(source, target) -> RigidTransform:
    """Closed-form least-squares rigid fit (SVD, reflection-corrected)."""
    src = as_points(source, "source")
    dst = as_points(target, "target")
    if src.shape != dst.shape:
        raise InvalidInput("correspondence sets must be index-aligned")
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    h = (src - sc).T @ (dst - dc)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1.0):
        raise SingularFit("correspondences are (near-)collinear")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rotation=r, translation=dc - r @ sc)


def icp_rigid(source, target, max_iters=ICP_MAX_ITERS, tol=ICP_TOL) -> IcpResult:
    """Rigid ICP: exact nearest-neighbor correspondences alternated with SVD fits.

    The RMS objective is non-increasing per iteration; termination on the
    iteration cap or relative improvement below ``tol``.
    """
    src = as_points(source, "source")
    dst = as_points(target, "target")
    if len(src) < 3 or len(dst) < 3:
        raise InvalidInput("both clouds need at least 3 points")

    transform = RigidTransform(rotation=np.eye(3), translation=np.zeros(3))
    history = []
    prev = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        moved = transform.apply(src)
        nn_idx, _ = knn(moved, dst, 1)
        transform = best_rigid_fit(src, dst[nn_idx[:, 0]])
        moved = transform.apply(src)
        rms = float(np.sqrt(np.mean(np.sum((moved - dst[nn_idx[:, 0]]) ** 2, axis=1))))
        history.append(rms)
        if prev - rms < tol * max(prev, 1e-30):
            break
        prev = rms
    final = transform.apply(src)
    _, d = knn(final, dst, 1)
    return IcpResult(transform=transform, residual=float(d.mean()),
                     history=history, iterations=it)


@dataclass(frozen=True)
class CpdConfig:
    """Non-rigid CPD settings; beta is in normalized units."""

    beta: float = 0.3
    lam: float = 2.0
    w: float = 0.1
    max_iters: int = 150
    tol: float = 1e-8

    def validate(self):
        if self.beta <= 0 or self.lam <= 0:
            raise InvalidInput("beta and lambda must be positive")
        if not 0.0 <= self.w < 1.0:
            raise InvalidInput("outlier weight must lie in [0, 1)")
        return self


@dataclass
class CpdResult:
    deformed: np.ndarray      # source mapped into target space (mm)
    displacement: np.ndarray  # deformed - source (mm)
    nll_history: list
    sigma2_history: list
    converged: bool
    responsibilities: np.ndarray = None  # final E-step P, shape (M, N)
    outlier_mass: np.ndarray = None      # per-target outlier share, shape (N,)


def gaussian_kernel(y, beta):
    d2 = ((y[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2.0 * beta * beta))


def cpd_nonrigid(source, target, config: CpdConfig = CpdConfig()) -> CpdResult:
    """Coherent point drift with a Gaussian-kernel motion field.

    Clouds are normalized internally (own centroids, shared max-radius scale);
    the returned displacement lives in millimetre space and includes the
    centroid alignment.
    """
    config.validate()
    y0 = as_points(source, "source")
    x0 = as_points(target, "target")
    if len(y0) < 3 or len(x0) < 3:
        raise InvalidInput("both clouds need at least 3 points")

    y_mean = y0.mean(axis=0)
    x_mean = x0.mean(axis=0)
    scale = max(np.linalg.norm(y0 - y_mean, axis=1).max(),
                np.linalg.norm(x0 - x_mean, axis=1).max(), 1e-12)
    y = (y0 - y_mean) / scale
    x = (x0 - x_mean) / scale

    m, n = len(y), len(x)
    g = gaussian_kernel(y, config.beta)
    wmat = np.zeros_like(y)
    t = y.copy()
    sigma2 = ((x[None, :, :] - y[:, None, :]) ** 2).sum() / (3.0 * m * n)

    nll_history = []
    sigma2_history = []
    converged = False
    prev_nll = np.inf
    p = None
    outlier_mass = None
    for _ in range(config.max_iters):
        # E-step: responsibilities with uniform-outlier mixing
        d2 = ((x[None, :, :] - t[:, None, :]) ** 2).sum(-1)  # (m, n)
        num = np.exp(-d2 / (2.0 * sigma2))
        c = config.w / (1.0 - config.w) * (2.0 * np.pi * sigma2) ** 1.5 * m / n
        den = num.sum(axis=0) + c
        den = np.maximum(den, np.finfo(np.float64).tiny)
        p = num / den
        outlier_mass = c / den

        # penalized negative log-likelihood at the current parameters
        nll = float(
            -np.log(den).sum()
            + 1.5 * n * np.log(2.0 * np.pi * sigma2)
            - n * np.log((1.0 - config.w) / m)
            + config.lam / 2.0 * np.trace(wmat.T @ g @ wmat)
        )
        nll_history.append(nll)

        # M-step: kernel-regularized motion field
        p1 = p.sum(axis=1)
        pt1 = p.sum(axis=0)
        npts = p1.sum()
        a = g * p1[:, None] + config.lam * sigma2 * np.eye(m)
        b = p @ x - p1[:, None] * y
        wmat = np.linalg.solve(a, b)
        t = y + g @ wmat

        trxpx = float((pt1 * (x * x).sum(axis=1)).sum())
        trtpt = float((p1 * (t * t).sum(axis=1)).sum())
        trptx = float(((p @ x) * t).sum())
        sigma2 = max((trxpx - 2.0 * trptx + trtpt) / (3.0 * npts), 1e-12)
        sigma2_history.append(sigma2)

        if abs(prev_nll - nll) < config.tol * max(abs(prev_nll), 1.0):
            converged = True
            break
        prev_nll = nll

    deformed = t * scale + x_mean
    return CpdResult(deformed=deformed, displacement=deformed - y0,
                     nll_history=nll_history, sigma2_history=sigma2_history,
                     converged=converged, responsibilities=p,
                     outlier_mass=outlier_mass)


# ---------------------------------------------------------------------------
# evaluation adapter
# ---------------------------------------------------------------------------

def baseline_displacement(method, P, S, cpd_config: CpdConfig = CpdConfig(),
                          max_cpd_points=CPD_MAX_SOURCE_POINTS):
    """Volumetric displacement field over P from a classical baseline.

    ICP registers all of P rigidly; CPD registers an FPS subset (bounded by
    ``max_cpd_points``) and the displacement is extended to every point of P.
    """
    P = as_points(P, "P")
    S = as_points(S, "S")
    if method == "icp":
        res = icp_rigid(P, S)
        return res.transform.apply(P) - P
    if method == "cpd":
        src = P
        if len(P) > max_cpd_points:
            src = P[np.sort(farthest_point_sample(P, max_cpd_points, 0))]
        res = cpd_nonrigid(src, S, cpd_config)
        if len(src) == len(P):
            return res.displacement
        return interpolate_3nn(src, res.displacement, P)
    raise InvalidInput(f"unknown baseline {method!r}")
