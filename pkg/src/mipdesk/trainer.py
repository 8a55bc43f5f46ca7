"""Training loop for the multiscale radiance field."""

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import encoding as enc
from . import field as field_mod
from . import metrics
from . import rng as rng_mod
from .dataset import MultiscaleDataset
from .renderer import FieldModel, Rays, RenderConfig, pass_backward, render_image, render_rays


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 25000
    batch_size: int = 32
    lam: float = 0.1
    lr_init: float = 5e-4
    lr_final: float = 5e-6
    warmup_steps: int = 2500
    warmup_scale: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # model
    L: int = 16
    L_dir: int = 4
    encoding: str = "IPE"
    depth: int = 4
    width: int = 64
    skip: int = -1
    dtype: str = "float32"
    # rendering
    n_coarse: int = 32
    n_fine: int = 32
    alpha: float = 0.01
    white_background: bool = True
    # ablations
    no_ipe: bool = False
    two_mlps: bool = False
    no_area_loss: bool = False
    supersample_train_k: int = 1
    # bookkeeping
    eval_every: int = 2500
    log_every: int = 100

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not self.lr_init > self.lr_final > 0:
            raise ValueError("need lr_init > lr_final > 0")
        if self.iterations > 0 and self.warmup_steps > self.iterations:
            raise ValueError("warmup_steps cannot exceed iterations")
        if self.batch_size < 1 or self.supersample_train_k < 1:
            raise ValueError("batch_size and supersample_train_k must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def render_config(self):
        return RenderConfig(n_coarse=self.n_coarse, n_fine=self.n_fine, alpha=self.alpha,
                            white_background=self.white_background)

    @property
    def encoding_config(self):
        return enc.EncodingConfig(L=self.L, L_dir=self.L_dir, variant=self.encoding)


def learning_rate(i, cfg: TrainConfig):
    """Log-linear decay from lr_init to lr_final with a sine warm-up factor."""
    n = max(cfg.iterations, 1)
    frac = i / n
    decay = math.exp((1 - frac) * math.log(cfg.lr_init) + frac * math.log(cfg.lr_final))
    if cfg.warmup_steps > 0:
        ramp = min(max(i / cfg.warmup_steps, 0.0), 1.0)
        warm = cfg.warmup_scale + (1 - cfg.warmup_scale) * math.sin(0.5 * math.pi * ramp)
    else:
        warm = 1.0
    return warm * decay


def build_model(cfg: TrainConfig) -> FieldModel:
    e = cfg.encoding_config
    spec = field_mod.MlpSpec(e.dim, e.dir_dim, depth=cfg.depth, width=cfg.width,
                             skip=None if cfg.skip < 0 else cfg.skip)
    dtype = np.dtype(cfg.dtype).type
    mlps = [field_mod.RadianceMlp.init(spec, cfg.seed, dtype, stream_key=k)
            for k in range(2 if cfg.two_mlps else 1)]
    return FieldModel(mlps, e, integrate=not cfg.no_ipe)


class Adam:
    def __init__(self, model: FieldModel, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [m.zero_grads() for m in model.mlps]
        self.v = [m.zero_grads() for m in model.mlps]
        self.step_count = 0

    def step(self, model: FieldModel, grads, lr):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        corr = math.sqrt(1 - b2**t) / (1 - b1**t)
        for mlp, g, m, v in zip(model.mlps, grads, self.m, self.v):
            for k, p in mlp.params.items():
                m[k] *= b1
                m[k] += (1 - b1) * g[k]
                v[k] *= b2
                v[k] += (1 - b2) * g[k] * g[k]
                # Bias correction folded into the step size and eps; algebraically the textbook update.
                p -= (lr * corr * m[k] / (np.sqrt(v[k]) + self.eps * math.sqrt(1 - b2**t))).astype(p.dtype)


@dataclass
class RayBatch:
    rays: Rays
    targets: np.ndarray
    weights: np.ndarray
    scale: np.ndarray

    def take(self, idx):
        return RayBatch(self.rays.take(idx), self.targets[idx], self.weights[idx], self.scale[idx])

    def __len__(self):
        return len(self.targets)


def gather_rays(ds: MultiscaleDataset, area_loss=True):
    """Every pixel of every image at every scale, flattened."""
    parts = []
    for s in ds.scales:
        for cam, img in zip(ds.cameras[s], ds.images[s]):
            rays = Rays.from_camera(cam)
            n = len(rays)
            w = ds.area_weight(s) if area_loss else 1.0
            parts.append((rays, img.reshape(-1, 3), np.full(n, w), np.full(n, s)))
    cat = lambda f: np.concatenate([getattr(p[0], f) for p in parts])
    rays = Rays(*(cat(f) for f in ("origins", "directions", "radii", "near", "far", "du", "dv")))
    return RayBatch(rays, np.concatenate([p[1] for p in parts]),
                    np.concatenate([p[2] for p in parts]), np.concatenate([p[3] for p in parts]))


class TrainingDiverged(RuntimeError):
    pass


def loss_and_grad(model: FieldModel, batch: RayBatch, cfg: TrainConfig, rng=None, t_fine=None,
                  supersample_k=1, with_grad=True, lam=None):
    """Area-weighted coarse/fine squared error and its parameter gradients.

    loss = (1/B) sum_r a_r (lam |C* - C_coarse|^2 + |C* - C_fine|^2)

    Sampling is treated as constant: gradients do not flow through the
    resampled fine edges. Returns (loss, loss_coarse, loss_fine, grads,
    fine_edges) where grads has one dict per MLP. ``lam`` overrides cfg.lam
    (zero is allowed here, for analysis).
    """
    lam = cfg.lam if lam is None else lam
    rcfg = cfg.render_config
    B = len(batch)
    a = batch.weights[:, None]
    grads = [m.zero_grads() for m in model.mlps] if with_grad else None
    if supersample_k == 1:
        variants = [batch.rays]
    else:
        offsets = rng.uniform(-0.5, 0.5, size=(supersample_k, B, 2))
        variants = [batch.rays.jittered(offsets[s], 1.0 / math.sqrt(supersample_k))
                    for s in range(supersample_k)]
    results = []
    c_sum = np.zeros((B, 3))
    f_sum = np.zeros((B, 3))
    for rays in variants:
        try:
            coarse, fine = render_rays(model, rays, rcfg, rng, t_fine)
        except FloatingPointError as e:
            raise TrainingDiverged(str(e)) from e
        results.append((coarse, fine))
        c_sum += coarse.color
        f_sum += fine.color
    k = len(variants)
    res_c = c_sum / k - batch.targets
    res_f = f_sum / k - batch.targets
    loss_c = lam * float(np.sum(a * res_c**2)) / B
    loss_f = float(np.sum(a * res_f**2)) / B
    loss = loss_c + loss_f
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss (coarse={loss_c}, fine={loss_f})")
    if with_grad:
        d_c = (2.0 * lam / (B * k)) * a * res_c
        d_f = (2.0 / (B * k)) * a * res_f
        for coarse, fine in results:
            pass_backward(model.coarse, coarse, d_c, rcfg, grads[0])
            pass_backward(model.fine, fine, d_f, rcfg, grads[-1])
    return loss, loss_c, loss_f, grads, results[0][1].t


def evaluate(model: FieldModel, ds: MultiscaleDataset, cfg: TrainConfig, supersample=1, scales=None,
             seed=0, chunk=4096):
    """Per-scale mean PSNR/SSIM/avg2 over a split, rendered deterministically."""
    rcfg = cfg.render_config
    if supersample > 1:
        rcfg = RenderConfig(**{**asdict(rcfg), "supersample_count": supersample})
    out = {}
    for s in scales or ds.scales:
        ps, ss = [], []
        for i, (cam, img) in enumerate(zip(ds.cameras[s], ds.images[s])):
            _, fine = render_image(model, cam, rcfg, seed=seed, image_key=s * 1000 + i,
                                   chunk=chunk)
            ps.append(metrics.psnr(fine, img))
            # SSIM is undefined below the window size; report NaN rather than fail.
            ss.append(metrics.ssim(fine, img) if min(img.shape[:2]) >= metrics.SSIM_WINDOW else np.nan)
        p, q = float(np.mean(ps)), float(np.mean(ss))
        avg = metrics.average_metric(p, q) if np.isfinite(q) else float("nan")
        out[s] = metrics.MetricReport(p, q, avg)
    return out


def summary_avg2(per_scale):
    """avg2 of the scale-averaged PSNR and SSIM."""
    p = float(np.mean([r.psnr for r in per_scale.values()]))
    s = float(np.mean([r.ssim for r in per_scale.values()]))
    return metrics.average_metric(p, s)


@dataclass
class TrainResult:
    model: FieldModel
    log: list
    evals: list
    scale_counts: dict


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return f"{x:.9g}"


def train(train_ds: MultiscaleDataset, cfg: TrainConfig, test_ds: MultiscaleDataset = None, out_dir=None,
          progress=None):
    """Optimize a fresh model; deterministic given ``cfg.seed``.

    Writes (when ``out_dir`` is set): train_log.csv, eval.csv, scale_counts.csv,
    timing.csv, checkpoint.bin (+ .json) and manifest.json. Everything except
    timing.csv is byte-reproducible.
    """
    model = build_model(cfg)
    opt = Adam(model, cfg.beta1, cfg.beta2, cfg.adam_eps)
    data = gather_rays(train_ds, area_loss=not cfg.no_area_loss)
    n_rays = len(data)
    log, evals, timing = [], [], []
    counts = {s: 0 for s in train_ds.scales}
    acc_c = acc_f = 0.0
    acc_n = 0
    t_start = time.perf_counter()

    def run_eval(it):
        if test_ds is None:
            return
        for s, r in evaluate(model, test_ds, cfg).items():
            evals.append((it, s, r.psnr, r.ssim, r.avg2))

    for i in range(cfg.iterations):
        gen = rng_mod.stream(cfg.seed, rng_mod.TRAIN, i)
        idx = gen.integers(0, n_rays, size=cfg.batch_size)
        batch = data.take(idx)
        for s, c in zip(*np.unique(batch.scale, return_counts=True)):
            counts[int(s)] += int(c)
        loss, lc, lf, grads, _ = loss_and_grad(model, batch, cfg, gen,
                                               supersample_k=cfg.supersample_train_k)
        lr = learning_rate(i, cfg)
        opt.step(model, grads, lr)
        if not all(np.isfinite(p).all() for m in model.mlps for p in m.params.values()):
            raise TrainingDiverged(f"non-finite parameters after step {i + 1} (lr={lr:.3g}, loss={loss:.6g})")
        acc_c += lc
        acc_f += lf
        acc_n += 1
        if (i + 1) % cfg.log_every == 0 or i + 1 == cfg.iterations:
            log.append((i + 1, acc_c / acc_n, acc_f / acc_n, lr))
            timing.append((i + 1, round(1000 * (time.perf_counter() - t_start))))
            acc_c = acc_f = 0.0
            acc_n = 0
            if progress:
                progress(i + 1, log[-1])
        if cfg.eval_every > 0 and (i + 1) % cfg.eval_every == 0 and i + 1 != cfg.iterations:
            run_eval(i + 1)
    run_eval(cfg.iterations)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(os.path.join(out_dir, "train_log.csv"), ("iter", "loss_coarse", "loss_fine", "lr"),
                   [(it, _fmt(a), _fmt(b), _fmt(c)) for it, a, b, c in log])
        _write_csv(os.path.join(out_dir, "timing.csv"), ("iter", "wall_ms"), timing)
        _write_csv(os.path.join(out_dir, "eval.csv"), ("iter", "scale", "psnr", "ssim", "avg2"),
                   [(it, s, _fmt(p), _fmt(q), _fmt(a)) for it, s, p, q, a in evals])
        _write_csv(os.path.join(out_dir, "scale_counts.csv"), ("scale", "samples"), sorted(counts.items()))
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), model, cfg)
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump({"config": asdict(cfg), "param_count": model.param_count(),
                       "train_rays": n_rays}, f, indent=2, sort_keys=True)
            f.write("\n")
    return TrainResult(model, log, evals, counts)


def save_checkpoint(path, model: FieldModel, cfg: TrainConfig):
    field_mod.save_checkpoint(path, model.mlps, meta={"train_config": asdict(cfg)})


def load_model(path):
    """(model, config) from a checkpoint written by :func:`train`."""
    mlps, meta = field_mod.load_checkpoint(path)
    cfg = config_from_dict(meta.get("train_config", {}))
    return FieldModel(mlps, cfg.encoding_config, integrate=not cfg.no_ipe), cfg


def config_from_dict(d):
    known = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in known})
