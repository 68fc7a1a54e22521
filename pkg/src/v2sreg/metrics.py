"""Evaluation metrics, corpus reports and the runtime benchmark harness."""

import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput


def _aligned(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
        raise InvalidInput(f"fields must be equal (N, 3) arrays, got {p.shape} vs {g.shape}")
    return p, g


def epe(pred, gt) -> float:
    """Mean Euclidean norm of the per-point displacement error (mm)."""
    p, g = _aligned(pred, gt)
    return float(np.linalg.norm(p - g, axis=1).mean())


def rmse(pred, gt) -> float:
    """Per-coordinate RMS error: sqrt(sum ||err||^2 / (3N)) (mm)."""
    p, g = _aligned(pred, gt)
    err = p - g
    return float(np.sqrt((err * err).sum() / (3.0 * len(p))))


def _mean_sd(values):
    if not values:
        return {"mean": float("nan"), "sd": float("nan"), "n": 0}
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return {"mean": mean, "sd": sd, "n": len(values)}


@dataclass
class EvalReport:
    """Per-sample metrics plus corpus statistics grouped by ratio and noise level."""

    method: str
    rows: list = field(default_factory=list)

    def add(self, *, path, ratio, noise, epe_mm, rmse_mm):
        self.rows.append({"path": path, "ratio": ratio, "noise": list(noise),
                          "epe_mm": epe_mm, "rmse_mm": rmse_mm})

    def summary(self):
        out = {
            "method": self.method,
            "overall": {"epe": _mean_sd([r["epe_mm"] for r in self.rows]),
                        "rmse": _mean_sd([r["rmse_mm"] for r in self.rows])},
            "by_ratio": {},
            "by_noise": {},
        }
        for key in sorted({r["ratio"] for r in self.rows}):
            rows = [r for r in self.rows if r["ratio"] == key]
            out["by_ratio"][f"{key:.2f}"] = {
                "epe": _mean_sd([r["epe_mm"] for r in rows]),
                "rmse": _mean_sd([r["rmse_mm"] for r in rows])}
        for key in sorted({tuple(r["noise"]) for r in self.rows}):
            rows = [r for r in self.rows if tuple(r["noise"]) == key]
            out["by_noise"][f"{key[0]:g},{key[1]:g}"] = {
                "epe": _mean_sd([r["epe_mm"] for r in rows]),
                "rmse": _mean_sd([r["rmse_mm"] for r in rows])}
        return out

    def to_json(self):
        return json.dumps({"summary": self.summary(), "rows": self.rows},
                          indent=2, sort_keys=True)

    def to_csv(self):
        s = self.summary()
        lines = ["method,group,epe_mean,epe_sd,rmse_mean,rmse_sd"]

        def fmt(group, stats):
            return (f"{self.method},{group},{stats['epe']['mean']:.6f},{stats['epe']['sd']:.6f},"
                    f"{stats['rmse']['mean']:.6f},{stats['rmse']['sd']:.6f}")

        lines.append(fmt("overall", s["overall"]))
        for key, stats in s["by_ratio"].items():
            lines.append(fmt(f"vis{key}", stats))
        for key, stats in s["by_noise"].items():
            lines.append(fmt(f"noise({key})", stats))
        return "\n".join(lines) + "\n"


def evaluate_corpus(records, load_sample, predict_fn, method,
                    noise_levels=((0.0, 0.0),), noise_fn=None) -> EvalReport:
    """Run ``predict_fn(P, S, sample) -> phi`` over a manifest split.

    ``records`` are manifest entries; ``load_sample(record)`` yields the
    Sample. Each requested (sigma_mm, a_mm) noise level perturbs the stored
    surface via ``noise_fn(S, level, record)`` before prediction.
    """
    if not records:
        raise InvalidInput("empty evaluation split")
    report = EvalReport(method=method)
    for rec in records:
        sample = load_sample(rec)
        p = sample.P.astype(np.float64)
        phi_gt = sample.Phi.astype(np.float64)
        for level in noise_levels:
            s = sample.S.astype(np.float64)
            if noise_fn is not None and (level[0] != 0.0 or level[1] != 0.0):
                s = noise_fn(s, level, rec)
            phi_pred = predict_fn(p, s, sample)
            report.add(path=rec["path"], ratio=rec["meta"]["ratio"], noise=level,
                       epe_mm=epe(phi_pred, phi_gt), rmse_mm=rmse(phi_pred, phi_gt))
    return report


# ---------------------------------------------------------------------------
# runtime harness
# ---------------------------------------------------------------------------

@dataclass
class TimingReport:
    """Per-sample runtime; T_total = T_inference + T_update, FPS = 1000/T_total."""

    t_inference_ms: float
    t_update_ms: float
    t_total_ms: float
    fps: float

    @classmethod
    def from_components(cls, t_inference_ms, t_update_ms):
        total = t_inference_ms + t_update_ms
        return cls(t_inference_ms=t_inference_ms, t_update_ms=t_update_ms,
                   t_total_ms=total, fps=1000.0 / total)

    def to_dict(self):
        return {"t_inference_ms": self.t_inference_ms, "t_update_ms": self.t_update_ms,
                "t_total_ms": self.t_total_ms, "fps": self.fps}


def benchmark(run_once, repetitions=5) -> TimingReport:
    """Median per-component timing over ``repetitions`` runs (first is warm-up).

    ``run_once()`` returns ``(t_inference_ms, t_update_ms)``.
    """
    if repetitions < 3:
        raise InvalidInput("need at least 3 repetitions (first is discarded)")
    run_once()  # warm-up, discarded
    infs, upds = [], []
    for _ in range(repetitions - 1):
        ti, tu = run_once()
        infs.append(ti)
        upds.append(tu)
    return TimingReport.from_components(statistics.median(infs), statistics.median(upds))


def time_update(n_points, inner_loops=200, repetitions=5, seed=0):
    """Median time (ms) of one V + phi displacement update at a given size."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n_points, 3))
    phi = rng.standard_normal((n_points, 3))
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for _ in range(inner_loops):
            _ = v + phi
        times.append((time.perf_counter() - t0) * 1e3 / inner_loops)
    return statistics.median(times)


def linear_fit_r2(xs, ys):
    """R^2 of the least-squares line through (xs, ys)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    coef = np.polyfit(xs, ys, 1)
    resid = ys - np.polyval(coef, xs)
    ss_tot = ((ys - ys.mean()) ** 2).sum()
    if ss_tot == 0:
        return 1.0
    return float(1.0 - (resid ** 2).sum() / ss_tot)


def update_scaling(sizes=(1024, 2048, 4096), **kwargs):
    """T_update across point counts plus the linearity R^2 of the fit."""
    times = [time_update(n, **kwargs) for n in sizes]
    return {"sizes": list(sizes), "t_update_ms": times,
            "r2": linear_fit_r2(sizes, times)}
