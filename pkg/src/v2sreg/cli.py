"""Command-line surface: gen, train, eval, bench, infer.

Structured results go to stdout as JSON; progress lines go to stderr.
Exit codes: 0 success, 2 input validation failure, 3 runtime failure.
A config file of ``key=value`` lines may back any flag; explicit flags win,
and unknown keys are rejected. ``V2S_SEED`` provides the seed fallback.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, datagen, metrics, net as network, ply
from .datagen import (DEFAULT_PREOP_BUDGET, DEFAULT_SURF_BUDGET, NoiseParams,
                      augment_noise, build_dataset, derive_seed, load_manifest,
                      outer_surface_mask, read_sample, synthetic_brain)
from .errors import FormatError, InvalidInput
from .geom import TriangleMesh
from .net import NetworkConfig, RegistrationNet, TrainingDiverged

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3


def _progress(msg):
    print(msg, file=sys.stderr, flush=True)


def _emit(doc):
    print(json.dumps(doc, indent=2, sort_keys=True))


def _csv_floats(text):
    return tuple(float(x) for x in str(text).split(",") if x != "")


def _csv_ints(text):
    return tuple(int(x) for x in str(text).split(",") if x != "")


def _csv_strs(text):
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _noise_levels(text):
    levels = []
    for part in str(text).split(";"):
        part = part.strip()
        if not part:
            continue
        vals = part.split(",")
        if len(vals) != 2:
            raise InvalidInput(f"noise level {part!r} must be 'sigma,a'")
        levels.append((float(vals[0]), float(vals[1])))
    return tuple(levels) or ((0.0, 0.0),)


def _merge_config(parser_actions, provided, config_path, defaults):
    """defaults < config file < explicit flags; unknown config keys rejected."""
    merged = dict(defaults)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise InvalidInput(f"config file {config_path} not found")
        types = {a.dest: (a.type or str) for a in parser_actions}
        for lineno, raw in enumerate(path.read_text().splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InvalidInput(f"{config_path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            dest = key.replace("-", "_")
            if dest not in merged:
                raise InvalidInput(f"{config_path}:{lineno}: unknown key {key!r}")
            merged[dest] = types.get(dest, str)(value)
    merged.update(provided)
    return argparse.Namespace(**merged)


def _resolve_seed(value):
    if value is not None:
        return int(value)
    return int(os.environ.get("V2S_SEED", "0"))


def _load_cases(opts):
    cases = []
    for i in range(opts.synthetic_brain):
        mesh, mask = synthetic_brain(i)
        cases.append((f"case{i}", mesh, mask, {"kind": "synthetic-brain", "case_index": i}))
    for path in opts.mesh:
        verts, faces, props = ply.read_ply(path)
        if len(faces) == 0:
            raise InvalidInput(f"{path}: mesh input requires faces")
        mesh = TriangleMesh(vertices=verts, faces=faces)
        mask = outer_surface_mask(mesh)
        cases.append((Path(path).stem, mesh, mask, {"kind": "ply", "path": str(path)}))
    if not cases:
        raise InvalidInput("provide --synthetic-brain N and/or --mesh files")
    return cases


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(opts):
    seed = _resolve_seed(opts.seed)
    cases = _load_cases(opts)
    out = Path(opts.out)
    noise = NoiseParams(sigma_mm=opts.sigma_mm, a_mm=opts.a_mm)
    manifest = build_dataset(
        cases, opts.variations, _csv_strs(opts.modes), _csv_floats(opts.ratios), out,
        global_seed=seed, preop_budget=opts.preop_points, surf_budget=opts.surf_points,
        smoothing=not opts.no_smoothing, noise=noise,
        progress=lambda rel: _progress(f"wrote {rel}"))

    mags = []
    for rec in manifest.samples:
        sample = read_sample(out / rec["path"])
        mags.append(float(np.linalg.norm(sample.Phi.astype(np.float64), axis=1).mean()))
    _emit({
        "out": str(out),
        "samples": len(manifest.samples),
        "splits": {name: len(manifest.split(name)) for name in ("train", "val", "test")},
        "initial_epe_mm": {"mean": float(np.mean(mags)),
                           "sd": float(np.std(mags, ddof=1)) if len(mags) > 1 else 0.0},
        "seed": seed,
    })
    return EXIT_OK


def _network_config(opts, n_preop, n_surf):
    sizes = _csv_ints(opts.sa_sizes)
    kneigh = _csv_ints(opts.sa_kneighbors)
    if len(kneigh) == 1:
        kneigh = kneigh * len(sizes)
    return NetworkConfig(
        n_preop=n_preop, n_surf=n_surf,
        sa_sizes=sizes, sa_channels=_csv_ints(opts.sa_channels),
        sa_kscales=tuple((k, 2 * k) for k in kneigh),
        bottleneck=opts.bottleneck, fp_channels=_csv_ints(opts.fp_channels),
        heads=opts.heads, loss_weights=_csv_floats(opts.loss_weights),
        smooth_weight=opts.smooth_weight, fps_seed=opts.fps_seed,
        init_seed=opts.init_seed, dtype="float32").validate()


def _load_split(manifest, root, name):
    return [(rec, read_sample(Path(root) / rec["path"])) for rec in manifest.split(name)]


def cmd_train(opts):
    seed = _resolve_seed(opts.seed)
    manifest_path = Path(opts.manifest)
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    train_recs = manifest.split("train")
    if not train_recs:
        raise InvalidInput("training split is empty")
    train_samples = [read_sample(root / rec["path"]) for rec in train_recs]
    val_samples = [read_sample(root / rec["path"]) for rec in manifest.split("val")]
    n_preop = max(len(s.P) for s in train_samples)
    n_surf = max(len(s.S) for s in train_samples)
    cfg = _network_config(opts, n_preop, n_surf)

    out = Path(opts.out)
    out.mkdir(parents=True, exist_ok=True)
    netw = RegistrationNet(cfg)
    _progress(f"training {netw.params.count()} parameters on {len(train_samples)} samples")
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:
        def log_fn(rec):
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
            _progress(f"epoch {rec['epoch']}: loss {rec['train_loss']:.4f} "
                      f"val_epe {rec['val_epe']:.4f}")

        history = network.train(
            netw, train_samples, val_samples, epochs=opts.epochs,
            batch_size=opts.batch_size, seed=seed, lr=opts.lr,
            weight_decay=opts.weight_decay, noise_sigma_max=opts.noise_sigma_max,
            noise_a_max=opts.noise_a_max, log_fn=log_fn, checkpoint_dir=out)

    _emit({"checkpoint": str(out / "best.v2sn"), "last": str(out / "last.v2sn"),
           "log": str(log_path), "epochs": opts.epochs, "seed": seed,
           "final": history[-1] if history else None})
    return EXIT_OK


def _predictor(method, checkpoint=None):
    if method == "identity":
        return lambda p, s, sample: np.zeros_like(p)
    if method in ("icp", "cpd"):
        return lambda p, s, sample: baselines.baseline_displacement(method, p, s)
    netw, _, _ = network.load_checkpoint(checkpoint)
    return lambda p, s, sample: network.infer(netw, p, s)[0]


def cmd_eval(opts):
    manifest_path = Path(opts.manifest)
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    records = manifest.split(opts.split)
    if not records:
        raise InvalidInput(f"split {opts.split!r} is empty")

    method = opts.method
    if method not in ("identity", "icp", "cpd"):
        if not Path(method).exists():
            raise InvalidInput(f"method {method!r} is not identity/icp/cpd or a checkpoint path")
        predict = _predictor("checkpoint", checkpoint=method)
        method_name = "proposed"
    else:
        predict = _predictor(method)
        method_name = method

    def noise_fn(s, level, rec):
        params = NoiseParams(sigma_mm=level[0], a_mm=level[1])
        sample_seed = derive_seed("eval-noise", rec["path"], level[0], level[1])
        sample = read_sample(root / rec["path"])
        return augment_noise(s, params, sample.P.astype(np.float64), sample_seed)

    done = {"n": 0}

    def load(rec):
        done["n"] += 1
        _progress(f"eval {done['n']}/{len(records)}: {rec['path']}")
        return read_sample(root / rec["path"])

    report = metrics.evaluate_corpus(records, load, predict, method_name,
                                     noise_levels=_noise_levels(opts.noise),
                                     noise_fn=noise_fn)
    if opts.out:
        Path(opts.out).write_text(report.to_json(), encoding="utf-8")
    if opts.csv:
        Path(opts.csv).write_text(report.to_csv(), encoding="utf-8")
    _emit(report.summary())
    return EXIT_OK


def cmd_bench(opts):
    netw, _, _ = network.load_checkpoint(opts.checkpoint)
    manifest_path = Path(opts.manifest)
    manifest = load_manifest(manifest_path)
    records = manifest.samples
    if not records:
        raise InvalidInput("manifest has no samples")
    sample = read_sample(manifest_path.parent / records[min(opts.sample_index, len(records) - 1)]["path"])
    p = sample.P.astype(np.float64)
    s = sample.S.astype(np.float64)

    out = {}

    def net_once():
        _, _, timing = network.infer(netw, p, s)
        return timing["t_inference_ms"], timing["t_update_ms"]

    _progress("benchmarking network")
    out["proposed"] = metrics.benchmark(net_once, repetitions=opts.reps).to_dict()

    import time as _time
    for name in _csv_strs(opts.baselines):
        def base_once(method=name):
            t0 = _time.perf_counter()
            phi = baselines.baseline_displacement(method, p, s)
            t1 = _time.perf_counter()
            _ = p + phi
            t2 = _time.perf_counter()
            return (t1 - t0) * 1e3, (t2 - t1) * 1e3

        _progress(f"benchmarking {name}")
        out[name] = metrics.benchmark(base_once, repetitions=opts.reps).to_dict()

    out["update_scaling"] = metrics.update_scaling(sizes=_csv_ints(opts.sizes))
    _emit(out)
    return EXIT_OK


def cmd_infer(opts):
    netw, _, _ = network.load_checkpoint(opts.checkpoint)
    preop, _, _ = ply.read_ply(opts.preop)
    surface, _, _ = ply.read_ply(opts.surface)
    phi, v_reg, timing = network.infer(netw, preop, surface)
    ply.write_ply(opts.out, v_reg,
                  vertex_props={"dx": phi[:, 0], "dy": phi[:, 1], "dz": phi[:, 2]})
    _emit({"out": str(opts.out), "points": len(v_reg), "timing": timing})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(sp):
    sp.add_argument("--config", help="key=value config file; explicit flags win")
    sp.add_argument("--threads", type=int, default=1,
                    help="worker threads (1 guarantees bitwise determinism)")


def build_parser():
    parser = argparse.ArgumentParser(prog="v2sreg",
                                     description="volume-to-surface registration workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset",
                       argument_default=argparse.SUPPRESS)
    g.add_argument("--out", required=True)
    g.add_argument("--synthetic-brain", type=int, dest="synthetic_brain")
    g.add_argument("--mesh", action="append", default=argparse.SUPPRESS)
    g.add_argument("--variations", type=int)
    g.add_argument("--modes", type=str)
    g.add_argument("--ratios", type=str)
    g.add_argument("--preop-points", type=int, dest="preop_points")
    g.add_argument("--surf-points", type=int, dest="surf_points")
    g.add_argument("--no-smoothing", action="store_true", dest="no_smoothing")
    g.add_argument("--sigma-mm", type=float, dest="sigma_mm")
    g.add_argument("--a-mm", type=float, dest="a_mm")
    g.add_argument("--seed", type=int)
    _add_common(g)
    g.set_defaults(func=cmd_gen, defaults={
        "synthetic_brain": 0, "mesh": [], "variations": 3,
        "modes": "global,composite", "ratios": "0.25,0.45,0.65",
        "preop_points": DEFAULT_PREOP_BUDGET, "surf_points": DEFAULT_SURF_BUDGET,
        "no_smoothing": False, "sigma_mm": 0.0, "a_mm": 0.0, "seed": None,
        "config": None, "threads": 1, "out": None})

    t = sub.add_parser("train", help="train the registration network",
                       argument_default=argparse.SUPPRESS)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float, dest="weight_decay")
    t.add_argument("--noise-sigma-max", type=float, dest="noise_sigma_max")
    t.add_argument("--noise-a-max", type=float, dest="noise_a_max")
    t.add_argument("--sa-sizes", dest="sa_sizes")
    t.add_argument("--sa-channels", dest="sa_channels")
    t.add_argument("--sa-kneighbors", dest="sa_kneighbors")
    t.add_argument("--fp-channels", dest="fp_channels")
    t.add_argument("--bottleneck", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--loss-weights", dest="loss_weights")
    t.add_argument("--smooth-weight", type=float, dest="smooth_weight")
    t.add_argument("--fps-seed", type=int, dest="fps_seed")
    t.add_argument("--init-seed", type=int, dest="init_seed")
    t.add_argument("--seed", type=int)
    _add_common(t)
    t.set_defaults(func=cmd_train, defaults={
        "epochs": 100, "batch_size": 2, "lr": 1e-3, "weight_decay": 1e-4,
        "noise_sigma_max": 5.0, "noise_a_max": 15.0,
        "sa_sizes": "512,128,32", "sa_channels": "32,64,128",
        "sa_kneighbors": "16", "fp_channels": "128,96,64,32",
        "bottleneck": 256, "heads": 4, "loss_weights": "1.0,0.3,0.3,0.05",
        "smooth_weight": 0.1, "fps_seed": 0, "init_seed": 0, "seed": None,
        "config": None, "threads": 1, "manifest": None, "out": None})

    e = sub.add_parser("eval", help="evaluate a method over a manifest split",
                       argument_default=argparse.SUPPRESS)
    e.add_argument("--manifest", required=True)
    e.add_argument("--method", required=True,
                   help="identity, icp, cpd, or a checkpoint path")
    e.add_argument("--split")
    e.add_argument("--noise", help="semicolon-separated sigma,a levels, e.g. '0,0;1,5'")
    e.add_argument("--out")
    e.add_argument("--csv")
    e.add_argument("--seed", type=int)
    _add_common(e)
    e.set_defaults(func=cmd_eval, defaults={
        "split": "test", "noise": "0,0", "out": None, "csv": None, "seed": None,
        "config": None, "threads": 1, "manifest": None, "method": None})

    b = sub.add_parser("bench", help="runtime benchmark",
                       argument_default=argparse.SUPPRESS)
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--manifest", required=True)
    b.add_argument("--sample-index", type=int, dest="sample_index")
    b.add_argument("--reps", type=int)
    b.add_argument("--baselines", type=str)
    b.add_argument("--sizes", type=str)
    b.add_argument("--seed", type=int)
    _add_common(b)
    b.set_defaults(func=cmd_bench, defaults={
        "sample_index": 0, "reps": 5, "baselines": "", "sizes": "1024,2048,4096",
        "seed": None, "config": None, "threads": 1, "checkpoint": None,
        "manifest": None})

    i = sub.add_parser("infer", help="register one pre-operative cloud to a surface",
                       argument_default=argparse.SUPPRESS)
    i.add_argument("preop")
    i.add_argument("surface")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int)
    _add_common(i)
    i.set_defaults(func=cmd_infer, defaults={
        "seed": None, "config": None, "threads": 1, "checkpoint": None,
        "out": None, "preop": None, "surface": None})

    return parser


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    provided = {k: v for k, v in vars(ns).items() if k not in ("func", "defaults")}
    try:
        sub_actions = []
        for action in parser._subparsers._group_actions:  # noqa: SLF001
            sub_actions = action.choices[provided.get("command", ns.command)]._actions
        provided.pop("command", None)
        opts = _merge_config(sub_actions, provided, provided.get("config"), ns.defaults)
        return ns.func(opts)
    except (InvalidInput, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures map to exit 3 per the CLI contract
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
