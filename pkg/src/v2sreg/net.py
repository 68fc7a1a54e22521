"""Volume-to-surface registration network.

The pre-operative cloud P and partial surface S are concatenated into one
token set whose input features are a one-bit source tag plus the token's
normalized coordinates (centroid-centered, radius-scaled). The tag is what
fuses the two clouds; the coordinates give tokens the positional identity
needed to regress position-dependent displacement fields. A stack of
set-abstraction levels (farthest point sampling + two-scale kNN aggregation)
encodes the combined cloud; a transformer-based feature-propagation decoder
emits a displacement head at each of four stages, restricted to P-originated
points. Training applies deep supervision across the scales plus a kNN-graph
smoothness penalty on the full-resolution field.
"""

import json
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import derive_seed
from .errors import FormatError, InvalidInput
from .geom import farthest_point_sample, knn, three_nn_weights

CHECKPOINT_MAGIC = b"V2SN"
CHECKPOINT_VERSION = 1

# source tag + normalized xyz
INPUT_FEATURES = 4


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and loss hyperparameters (desk-scale defaults)."""

    n_preop: int = 2048
    n_surf: int = 1024
    sa_sizes: tuple = (512, 128, 32)
    sa_channels: tuple = (32, 64, 128)
    sa_kscales: tuple = ((16, 32), (16, 32), (16, 32))
    bottleneck: int = 256
    fp_channels: tuple = (128, 96, 64, 32)
    heads: int = 4
    ff_expansion: int = 2
    loss_weights: tuple = (1.0, 0.3, 0.3, 0.05)
    smooth_weight: float = 0.1
    smooth_k: int = 8
    fps_seed: int = 0
    init_seed: int = 0
    dtype: str = "float32"

    def validate(self):
        if len(self.sa_sizes) != len(self.sa_channels) or len(self.sa_sizes) != len(self.sa_kscales):
            raise InvalidInput("sa_sizes, sa_channels and sa_kscales must have equal length")
        if len(self.fp_channels) != len(self.sa_sizes) + 1:
            raise InvalidInput("need one FP stage per SA level plus the bottleneck stage")
        if len(self.loss_weights) != len(self.fp_channels):
            raise InvalidInput("one loss weight per predicted field")
        if any(w < 0 for w in self.loss_weights) or self.smooth_weight < 0:
            raise InvalidInput("loss weights must be nonnegative")
        for c in self.fp_channels:
            if c % self.heads != 0:
                raise InvalidInput("fp channel widths must be divisible by the head count")
        if self.dtype not in ("float32", "float64"):
            raise InvalidInput("dtype must be float32 or float64")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        for key in ("sa_sizes", "sa_channels", "fp_channels", "loss_weights"):
            doc[key] = tuple(doc[key])
        doc["sa_kscales"] = tuple(tuple(k) for k in doc["sa_kscales"])
        return cls(**doc).validate()


class _Params:
    """Ordered parameter registry backing checkpoint (de)serialization."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)
        self.tensors = OrderedDict()

    def add(self, name, value):
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self.tensors[name] = t
        return t

    def flat(self):
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    def load_flat(self, vec):
        pos = 0
        for t in self.tensors.values():
            n = t.data.size
            t.data = vec[pos:pos + n].reshape(t.data.shape).astype(self.dtype)
            pos += n
        if pos != vec.size:
            raise InvalidInput("parameter vector size mismatch")

    def count(self):
        return sum(t.data.size for t in self.tensors.values())


class _Linear:
    def __init__(self, params, name, cin, cout, rng):
        w = rng.standard_normal((cin, cout)) * np.sqrt(2.0 / cin)  # He initialization
        self.W = params.add(f"{name}.W", w)
        self.b = params.add(f"{name}.b", np.zeros(cout))

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.W), self.b)


class _LayerNorm:
    def __init__(self, params, name, dim):
        self.gamma = params.add(f"{name}.gamma", np.ones(dim))
        self.beta = params.add(f"{name}.beta", np.zeros(dim))

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)


class _TransformerBlock:
    """Pre-norm single-layer transformer: MHSA + residual, then FF + residual."""

    def __init__(self, params, name, dim, heads, ff_expansion, rng):
        self.dim = dim
        self.heads = heads
        self.ln1 = _LayerNorm(params, f"{name}.ln1", dim)
        self.wq = _Linear(params, f"{name}.wq", dim, dim, rng)
        self.wk = _Linear(params, f"{name}.wk", dim, dim, rng)
        self.wv = _Linear(params, f"{name}.wv", dim, dim, rng)
        self.wo = _Linear(params, f"{name}.wo", dim, dim, rng)
        self.ln2 = _LayerNorm(params, f"{name}.ln2", dim)
        self.ff1 = _Linear(params, f"{name}.ff1", dim, dim * ff_expansion, rng)
        self.ff2 = _Linear(params, f"{name}.ff2", dim * ff_expansion, dim, rng)

    def _split_heads(self, t, n):
        dh = self.dim // self.heads
        return ad.transpose(ad.reshape(t, (n, self.heads, dh)), (1, 0, 2))

    def attention(self, x):
        n = x.shape[0]
        dh = self.dim // self.heads
        h = self.ln1(x)
        q = self._split_heads(self.wq(h), n)
        k = self._split_heads(self.wk(h), n)
        v = self._split_heads(self.wv(h), n)
        # python-float scale: a numpy scalar here would upcast float32 activations
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / float(np.sqrt(dh)))
        attn = ad.softmax(scores)
        mixed = ad.matmul(attn, v)  # (H, N, dh)
        merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (n, self.dim))
        return self.wo(merged), attn

    def __call__(self, x):
        out, _ = self.attention(x)
        x = ad.add(x, out)
        h = self.ln2(x)
        return ad.add(x, self.ff2(ad.relu(self.ff1(h))))


class _ScaleUnit:
    """Shared affine+ReLU stack applied per neighbor, then max-pool."""

    def __init__(self, params, name, cin, cout, rng):
        self.l1 = _Linear(params, f"{name}.l1", cin, cout, rng)
        self.l2 = _Linear(params, f"{name}.l2", cout, cout, rng)

    def __call__(self, grouped):
        h = ad.relu(self.l1(grouped))
        h = ad.relu(self.l2(h))
        return ad.amax(h, axis=1)


class _SetAbstraction:
    """FPS downsampling + 3-NN feature transfer + multi-scale point unit."""

    def __init__(self, params, name, cin, cout, kscales, rng):
        self.cin = cin
        self.kscales = kscales
        half = cout // len(kscales)
        widths = [half] * (len(kscales) - 1) + [cout - half * (len(kscales) - 1)]
        unit_in = 3 + 2 * cin  # relative xyz + neighbor features + center features
        self.units = [_ScaleUnit(params, f"{name}.scale{i}", unit_in, w, rng)
                      for i, w in enumerate(widths)]

    def aggregate(self, prev_pts, prev_feats, centers, center_feats, dtype,
                  coord_scale=1.0):
        """Multi-scale aggregation with explicit centers (FPS handled by caller).

        Relative coordinates are divided by ``coord_scale`` so feature
        magnitudes stay O(1) regardless of the cloud's physical extent.
        """
        m = len(centers)
        pooled = []
        for k, unit in zip(self.kscales, self.units):
            nidx, _ = knn(centers, prev_pts, k)
            grouped = ad.gather(prev_feats, nidx)  # (m, k, cin)
            rel = Tensor(((prev_pts[nidx] - centers[:, None, :]) / coord_scale).astype(dtype))
            ctr = ad.expand(ad.reshape(center_feats, (m, 1, self.cin)), (m, k, self.cin))
            pooled.append(unit(ad.concat([rel, grouped, ctr], axis=-1)))
        return ad.concat(pooled, axis=-1)


@dataclass
class ForwardResult:
    """Per-scale predictions; ``preds[k]`` pairs a (n_k, 3) tensor with the
    indices of the P points it covers (into the original P array)."""

    preds: list
    levels: list = field(default_factory=list)


class RegistrationNet:
    def __init__(self, config: NetworkConfig):
        self.config = config.validate()
        cfg = self.config
        self.params = _Params(cfg.dtype)
        rng = np.random.default_rng(cfg.init_seed)

        self.sa_levels = []
        cin = INPUT_FEATURES
        for l, (cout, ks) in enumerate(zip(cfg.sa_channels, cfg.sa_kscales)):
            self.sa_levels.append(_SetAbstraction(self.params, f"sa{l}", cin, cout, ks, rng))
            cin = cout
        self.bottleneck = _Linear(self.params, "bottleneck", cfg.sa_channels[-1], cfg.bottleneck, rng)

        # decoder stage k: coarse channels from previous stage (or bottleneck),
        # fine channels from the matching encoder level (or the raw input features)
        fine_channels = [cfg.sa_channels[-1]] + list(reversed(cfg.sa_channels[:-1])) + [INPUT_FEATURES]
        coarse_channels = [cfg.bottleneck] + list(cfg.fp_channels[:-1])
        self.fp_blocks = []
        for k, cdim in enumerate(cfg.fp_channels):
            blk = {
                "proj": _Linear(self.params, f"fp{k}.proj",
                                fine_channels[k] + coarse_channels[k], cdim, rng),
                "tr": _TransformerBlock(self.params, f"fp{k}.tr", cdim,
                                        cfg.heads, cfg.ff_expansion, rng),
                "head": _Linear(self.params, f"fp{k}.head", cdim, 3, rng),
            }
            self.fp_blocks.append(blk)

    # ------------------------------------------------------------------
    def _np_dtype(self):
        return np.dtype(self.config.dtype)

    def forward(self, P, S) -> ForwardResult:
        """Predict multi-scale displacement fields over P given the pair (P, S)."""
        cfg = self.config
        P = np.asarray(P, dtype=np.float64)
        S = np.asarray(S, dtype=np.float64)
        if P.ndim != 2 or P.shape[1] != 3 or S.ndim != 2 or S.shape[1] != 3:
            raise InvalidInput("P and S must be (N, 3) clouds")
        if len(S) < 3:
            raise InvalidInput("surface cloud must have at least 3 points")
        n_p = len(P)
        pts = np.concatenate([P, S])
        if cfg.sa_sizes[0] > len(pts):
            raise InvalidInput("combined cloud smaller than the first sampling size")
        dtype = self._np_dtype()

        centroid = pts.mean(axis=0)
        coord_scale = max(np.linalg.norm(pts - centroid, axis=1).max(), 1e-9)
        tags = np.zeros((len(pts), 1))
        tags[n_p:] = 1.0
        feats = Tensor(np.concatenate([tags, (pts - centroid) / coord_scale],
                                      axis=1).astype(dtype))
        orig = np.arange(len(pts))

        levels = [(pts, feats, orig)]
        for l, (m, sa) in enumerate(zip(cfg.sa_sizes, self.sa_levels)):
            prev_pts, prev_feats, prev_orig = levels[-1]
            sel = farthest_point_sample(prev_pts, m, cfg.fps_seed + l)
            centers = prev_pts[sel]
            idx3, w3 = three_nn_weights(prev_pts, centers)
            center_feats = ad.weighted_gather(prev_feats, idx3, w3)
            out = sa.aggregate(prev_pts, prev_feats, centers, center_feats, dtype,
                               coord_scale=coord_scale)
            levels.append((centers, out, prev_orig[sel]))

        coarse_pts, coarse_feats = levels[-1][0], ad.relu(self.bottleneck(levels[-1][1]))

        preds = []
        for k, blk in enumerate(self.fp_blocks):
            fine_pts, fine_feats, fine_orig = levels[len(levels) - 1 - k]
            idx3, w3 = three_nn_weights(coarse_pts, fine_pts)
            up = ad.weighted_gather(coarse_feats, idx3, w3)
            fused = blk["proj"](ad.concat([fine_feats, up], axis=-1))
            refined = blk["tr"](fused)
            head = blk["head"](refined)
            p_pos = np.nonzero(fine_orig < n_p)[0]
            preds.append((ad.gather(head, p_pos), fine_orig[p_pos]))
            coarse_pts, coarse_feats = fine_pts, refined
        return ForwardResult(preds=preds, levels=levels)


def smoothness_graph(P, k=8):
    """Indices of the k nearest neighbors of each P point (self excluded)."""
    idx, _ = knn(P, P, min(k + 1, len(P)))
    return idx[:, 1:]


def loss(result: ForwardResult, phi_gt, config: NetworkConfig, smooth_idx=None):
    """Deep-supervision loss: weighted per-scale mean endpoint error plus a
    kNN-graph smoothness penalty on the full-resolution field."""
    phi_gt = np.asarray(phi_gt)
    dtype = np.dtype(config.dtype)
    total = Tensor(np.zeros((), dtype=dtype))
    for (u, pidx), weight in zip(result.preds, config.loss_weights):
        if len(pidx) == 0:
            continue
        if pidx.max() >= len(phi_gt):
            raise InvalidInput("ground-truth field shorter than prediction index range")
        gt = Tensor(phi_gt[pidx].astype(dtype))
        lk = ad.tmean(ad.rownorm(ad.sub(u, gt)))
        total = ad.add(total, ad.scale(lk, weight))
    if config.smooth_weight > 0 and smooth_idx is not None:
        u3, pidx = result.preds[-1]
        nbr = ad.gather(u3, smooth_idx)  # (N, k, 3)
        ctr = ad.expand(ad.reshape(u3, (len(pidx), 1, 3)), nbr.shape)
        diff = ad.sub(nbr, ctr)
        r = ad.tmean(ad.tsum(ad.mul(diff, diff), axis=-1))
        total = ad.add(total, ad.scale(r, config.smooth_weight))
    return total


# ---------------------------------------------------------------------------
# optimizer / training
# ---------------------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: _Params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = np.zeros(params.count(), dtype=params.dtype)
        self.v = np.zeros(params.count(), dtype=params.dtype)

    def zero_grad(self):
        for t in self.params.tensors.values():
            t.grad = None

    def step(self):
        self.t += 1
        g = np.concatenate([
            (t.grad if t.grad is not None else np.zeros_like(t.data)).ravel()
            for t in self.params.tensors.values()
        ])
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        flat = self.params.flat()
        flat -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.wd * flat)
        self.params.load_flat(flat)


def cosine_lr(base_lr, epoch, total_epochs):
    if total_epochs <= 0:
        return base_lr
    return float(0.5 * base_lr * (1.0 + np.cos(np.pi * epoch / total_epochs)))


class TrainingDiverged(RuntimeError):
    pass


def epe_of(result: ForwardResult, phi_gt):
    """Endpoint error of the full-resolution prediction against ground truth."""
    u3, pidx = result.preds[-1]
    err = u3.data.astype(np.float64) - np.asarray(phi_gt, dtype=np.float64)[pidx]
    return float(np.linalg.norm(err, axis=1).mean())


def train(net: RegistrationNet, train_samples, val_samples, *, epochs,
          batch_size=2, seed=0, lr=1e-3, weight_decay=1e-4,
          noise_sigma_max=5.0, noise_a_max=15.0, augment=None, log_fn=None,
          checkpoint_dir=None):
    """Optimize the network; returns per-epoch log records.

    ``train_samples``/``val_samples`` are datagen Samples. Surface noise is
    redrawn per (epoch, sample) inside the configured ranges; ``augment``
    overrides the default augmentation hook. Single-threaded execution is
    deterministic for a fixed seed. Raises TrainingDiverged on a non-finite
    loss (the last finished epoch's checkpoint stays on disk).
    """
    from .datagen import NoiseParams, augment_noise

    if not train_samples:
        raise InvalidInput("training split is empty")
    cfg = net.config
    opt = AdamW(net.params, lr=lr, weight_decay=weight_decay)
    cache = {}

    def prepared(sample, sample_key):
        if sample_key not in cache:
            p = sample.P.astype(np.float64)
            cache[sample_key] = (p, sample.Phi.astype(np.float64),
                                 smoothness_graph(p, cfg.smooth_k))
        return cache[sample_key]

    def default_augment(sample, epoch, idx):
        if noise_sigma_max == 0.0 and noise_a_max == 0.0:
            return sample.S.astype(np.float64)
        rng = np.random.default_rng(derive_seed("aug", seed, epoch, idx))
        params = NoiseParams(sigma_mm=rng.uniform(0, noise_sigma_max),
                             a_mm=rng.uniform(0, noise_a_max))
        return augment_noise(sample.S.astype(np.float64), params,
                             sample.P.astype(np.float64),
                             derive_seed("aug-noise", seed, epoch, idx))

    draw_surface = augment or default_augment
    history = []
    best_epe = np.inf

    for epoch in range(epochs):
        opt.lr = cosine_lr(lr, epoch, epochs)
        order = np.random.default_rng(derive_seed("shuffle", seed, epoch)).permutation(len(train_samples))
        losses = []
        for lo in range(0, len(order), batch_size):
            batch = order[lo:lo + batch_size]
            opt.zero_grad()
            for idx in batch:
                sample = train_samples[idx]
                p64, phi, smooth_idx = prepared(sample, int(idx))
                s64 = draw_surface(sample, epoch, int(idx))
                out = net.forward(p64, s64)
                total = ad.scale(loss(out, phi, cfg, smooth_idx), 1.0 / len(batch))
                if not np.isfinite(total.data):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                total.backward()
                losses.append(float(total.data) * len(batch))
            opt.step()

        val_epe = np.nan
        val_rmse = np.nan
        if val_samples:
            errs = []
            sqs = []
            for sample in val_samples:
                out = net.forward(sample.P.astype(np.float64), sample.S.astype(np.float64))
                u3, pidx = out.preds[-1]
                err = u3.data.astype(np.float64) - sample.Phi.astype(np.float64)[pidx]
                errs.append(np.linalg.norm(err, axis=1).mean())
                sqs.append((err ** 2).sum() / (3 * len(err)))
            val_epe = float(np.mean(errs))
            val_rmse = float(np.sqrt(np.mean(sqs)))

        record = {"epoch": epoch, "lr": float(opt.lr),
                  "train_loss": float(np.mean(losses)),
                  "val_epe": val_epe, "val_rmse": val_rmse}
        history.append(record)
        if log_fn:
            log_fn(record)
        if checkpoint_dir is not None:
            from pathlib import Path
            path = Path(checkpoint_dir)
            path.mkdir(parents=True, exist_ok=True)
            save_checkpoint(net, path / "last.v2sn", optimizer=opt, epoch=epoch)
            if not val_samples or val_epe <= best_epe:
                best_epe = val_epe
                save_checkpoint(net, path / "best.v2sn", optimizer=opt, epoch=epoch)
    return history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: RegistrationNet, path, optimizer: AdamW = None, epoch=0):
    cfg_blob = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    flat = net.params.flat().astype(net.params.dtype)
    if optimizer is not None:
        moments = np.concatenate([optimizer.m, optimizer.v]).astype(net.params.dtype)
    else:
        moments = np.zeros(2 * flat.size, dtype=net.params.dtype)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype("<f4" if net.params.dtype == np.float32 else "<f8").tobytes())
        fh.write(moments.astype("<f4" if net.params.dtype == np.float32 else "<f8").tobytes())
        fh.write(struct.pack("<I", epoch))


def load_checkpoint(path):
    """Rebuild the network (and optimizer moments) stored at ``path``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (cfg_len,) = struct.unpack_from("<I", blob, 6)
    pos = 10
    try:
        cfg = NetworkConfig.from_dict(json.loads(blob[pos:pos + cfg_len].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("malformed checkpoint config", offset=pos)
    pos += cfg_len
    (count,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    net = RegistrationNet(cfg)
    if count != net.params.count():
        raise FormatError("parameter count does not match architecture", offset=pos)
    itemsize = 4 if cfg.dtype == "float32" else 8
    dt = "<f4" if cfg.dtype == "float32" else "<f8"
    need = count * itemsize
    if pos + 3 * need + 4 > len(blob):
        raise FormatError("truncated checkpoint payload", offset=pos)
    flat = np.frombuffer(blob, dtype=dt, count=count, offset=pos).astype(cfg.dtype)
    pos += need
    moments = np.frombuffer(blob, dtype=dt, count=2 * count, offset=pos).astype(cfg.dtype)
    pos += 2 * need
    (epoch,) = struct.unpack_from("<I", blob, pos)
    net.params.load_flat(flat)
    opt = AdamW(net.params)
    opt.m = moments[:count].copy()
    opt.v = moments[count:].copy()
    return net, opt, epoch


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def infer(net: RegistrationNet, P, S):
    """Full-resolution displacement prediction plus the registered cloud.

    Oversized inputs are FPS-downsampled to the configured budgets; the
    predicted field is then extended back to every input point by 3-NN
    inverse-distance interpolation. Returns ``(phi, v_reg, timing)`` with
    timing fields in milliseconds.
    """
    cfg = net.config
    P = np.asarray(P, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)

    t0 = time.perf_counter()
    p_in = P
    if len(P) > cfg.n_preop:
        sel = np.sort(farthest_point_sample(P, cfg.n_preop, cfg.fps_seed))
        p_in = P[sel]
    s_in = S
    if len(S) > cfg.n_surf:
        keep = np.sort(farthest_point_sample(S, cfg.n_surf, cfg.fps_seed))
        s_in = S[keep]
    out = net.forward(p_in, s_in)
    u3, pidx = out.preds[-1]
    phi_sub = u3.data.astype(np.float64)
    if len(p_in) == len(P) and len(pidx) == len(P):
        phi = np.empty_like(P)
        phi[pidx] = phi_sub
    else:
        idx3, w3 = three_nn_weights(p_in[pidx], P)
        phi = np.einsum("nk,nkc->nc", w3, phi_sub[idx3])
    t1 = time.perf_counter()
    v_reg = P + phi
    t2 = time.perf_counter()

    t_inf = (t1 - t0) * 1e3
    t_upd = (t2 - t1) * 1e3
    t_total = t_inf + t_upd
    timing = {"t_inference_ms": t_inf, "t_update_ms": t_upd,
              "t_total_ms": t_total, "fps": 1000.0 / t_total}
    return phi, v_reg, timing
