"""Command-line entry point: verify, gen-data, train, render, eval, sweep-l.

Exit codes: 0 success, 1 a check or evaluation failed, 2 usage error.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import config as cfgio
from . import dataset, metrics, oracle, trainer
from .renderer import RenderConfig, render_image

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class GenDataConfig:
    scene: str = "three-spheres"
    scene_scale: float = 1.0
    spp: int = 16
    seed: int = 0
    n_train: int = 16
    n_test: int = 4
    width: int = 128
    height: int = 128
    radius: float = 3.5
    fov_x_deg: float = 45.0
    near: float = 1.5
    far: float = 5.5

    def to_data_config(self):
        if self.scene not in dataset.SCENES:
            raise UsageError(f"unknown scene {self.scene!r}; choose from {', '.join(dataset.SCENES)}")
        rig = dataset.RigSpec(n_train=self.n_train, n_test=self.n_test, radius=self.radius,
                              fov_x_deg=self.fov_x_deg, width=self.width, height=self.height,
                              near=self.near, far=self.far)
        return dataset.DataConfig(scene=self.scene, scene_scale=self.scene_scale, spp=self.spp, rig=rig,
                                  seed=self.seed)


def _load_config(cls, args, base=None):
    values = cfgio.parse_file(args.config) if args.config else {}
    values.update(cfgio.parse_overrides(args.overrides))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return cfgio.build(cls, values, base)


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _manifest(out, command, **extra):
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "manifest.json"), {"command": command, "version": __version__, **extra})


def _parse_ints(text, name):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{name}: expected comma-separated integers, got {text!r}")
    if not vals:
        raise UsageError(f"--{name}: empty list")
    return vals


# -- subcommands -----------------------------------------------------------------

def cmd_verify(args):
    seed = 0 if args.seed is None else args.seed
    report = oracle.run_checks(seed=seed, mc_scale=args.mc_scale, mutate=args.mutate)
    ok = all(r["pass"] for r in report)
    doc = {"seed": seed, "mc_scale": args.mc_scale, "mutate": args.mutate, "pass": ok, "checks": report}
    path = args.report or os.path.join(args.out, "verify.json")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    _write_json(path, doc)
    for r in report:
        print(f"{'PASS' if r['pass'] else 'FAIL'}  {r['name']:<24} {r['statistic']:.4g} (tol {r['tolerance']:.3g})")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gen_data(args):
    gc = _load_config(GenDataConfig, args)
    train, test = dataset.make_dataset(gc.to_data_config())
    dataset.save_dataset(args.out, train, test)
    with open(os.path.join(args.out, "data.conf"), "w") as f:
        f.write(cfgio.dump(gc))
    _manifest(args.out, "gen-data", config=asdict(gc))
    print(f"wrote {len(train.images[1])} train / {len(test.images[1])} test views to {args.out}")
    return EXIT_OK


def _require_data(args):
    if not args.data:
        raise UsageError("--data is required (run gen-data first)")
    if not os.path.exists(os.path.join(args.data, "transforms_train.json")):
        raise UsageError(f"{args.data}: no transforms_train.json")


def cmd_train(args):
    _require_data(args)
    tc = _load_config(trainer.TrainConfig, args)
    train = dataset.load_split(args.data, "train")
    test = dataset.load_split(args.data, "test")

    def progress(i, row):
        if not args.quiet:
            print(f"iter {row[0]:>7}  coarse {row[1]:.5f}  fine {row[2]:.5f}  lr {row[3]:.3g}", flush=True)

    result = trainer.train(train, tc, test, out_dir=args.out, progress=progress)
    _manifest(args.out, "train", config=asdict(tc), data=os.path.abspath(args.data),
              param_count=result.model.param_count(), scale_counts={str(k): v for k, v in result.scale_counts.items()})
    return EXIT_OK


def _render_config(tc, supersample):
    if supersample < 1:
        raise UsageError("--supersample must be >= 1")
    return replace(tc.render_config, supersample_count=supersample)


def cmd_render(args):
    _require_data(args)
    if args.scale not in dataset.SCALES:
        raise UsageError(f"--scale must be one of {dataset.SCALES}")
    model, tc = trainer.load_model(args.checkpoint)
    ds = dataset.load_split(args.data, args.split)
    rcfg = _render_config(tc, args.supersample)
    seed = 0 if args.seed is None else args.seed
    os.makedirs(args.out, exist_ok=True)
    idx = range(len(ds.cameras[args.scale])) if args.index is None else [args.index]
    for i in idx:
        cam = ds.cameras[args.scale][i]
        _, fine = render_image(model, cam, rcfg, seed=seed, image_key=args.scale * 1000 + i)
        base = os.path.join(args.out, f"{args.split}_r_{i}_s{args.scale}_ss{args.supersample}")
        dataset.write_png(base + ".png", fine)
        np.save(base + ".npy", fine.astype(np.float32))
        print(f"{base}.png  {fine.shape[1]}x{fine.shape[0]}")
    _manifest(args.out, "render", checkpoint=os.path.abspath(args.checkpoint), scale=args.scale,
              supersample=args.supersample, seed=seed, split=args.split)
    return EXIT_OK


def cmd_eval(args):
    _require_data(args)
    scales = _parse_ints(args.scales, "scales")
    bad = [s for s in scales if s not in dataset.SCALES]
    if bad:
        raise UsageError(f"--scales: unsupported {bad}")
    names = args.method or []
    if names and len(names) != len(args.checkpoint):
        raise UsageError("give one --method per --checkpoint")
    scene = args.scene or os.path.basename(os.path.normpath(args.data))
    ds = dataset.load_split(args.data, args.split)
    rows = []
    for k, ckpt in enumerate(args.checkpoint):
        model, tc = trainer.load_model(ckpt)
        name = names[k] if names else os.path.basename(os.path.dirname(os.path.abspath(ckpt)))
        per_scale = trainer.evaluate(model, ds, tc, supersample=args.supersample, scales=scales,
                                     seed=0 if args.seed is None else args.seed)
        for s in scales:
            r = per_scale[s]
            rows.append({"scene": scene, "scale": s, "method": name, "psnr": r.psnr, "ssim": r.ssim, "avg2": r.avg2})
            print(f"{name:<16} scale {s}  psnr {r.psnr:7.3f}  ssim {r.ssim:.4f}  avg2 {r.avg2:.5f}")
    os.makedirs(args.out, exist_ok=True)
    metrics.write_csv(os.path.join(args.out, "metrics.csv"), rows)
    _manifest(args.out, "eval", checkpoints=[os.path.abspath(c) for c in args.checkpoint], scales=scales,
              supersample=args.supersample, split=args.split)
    return EXIT_OK


def sweep_l(train_ds, test_ds, base: trainer.TrainConfig, L_values, seeds, out=None, log=print):
    """Train PE and IPE models for every L and seed.

    Returns (summary rows (variant, L, psnr), per-run rows). PSNR is the test
    PSNR averaged over all scales, then over seeds.
    """
    runs = []
    for variant in ("PE", "IPE"):
        for L in L_values:
            for seed in seeds:
                tc = replace(base, L=L, seed=seed, no_ipe=(variant == "PE"), encoding="IPE", eval_every=0)
                res = trainer.train(train_ds, tc)
                ev = trainer.evaluate(res.model, test_ds, tc)
                p = float(np.mean([r.psnr for r in ev.values()]))
                runs.append((variant, L, seed, p))
                log(f"{variant:<4} L={L:<3} seed={seed}  psnr {p:.3f}")
    summary = []
    for variant in ("PE", "IPE"):
        for L in L_values:
            vals = [r[3] for r in runs if r[0] == variant and r[1] == L]
            summary.append((variant, L, float(np.mean(vals))))
    if out:
        os.makedirs(out, exist_ok=True)
        trainer._write_csv(os.path.join(out, "sweep_l.csv"), ("variant", "L", "psnr"),
                           [(v, L, f"{p:.6f}") for v, L, p in summary])
        trainer._write_csv(os.path.join(out, "sweep_l_runs.csv"), ("variant", "L", "seed", "psnr"),
                           [(v, L, s, f"{p:.6f}") for v, L, s, p in runs])
    return summary, runs


def cmd_sweep_l(args):
    _require_data(args)
    tc = _load_config(trainer.TrainConfig, args)
    L_values = _parse_ints(args.L, "L")
    seeds = _parse_ints(args.seeds, "seeds") if args.seeds else [tc.seed]
    train = dataset.load_split(args.data, "train")
    test = dataset.load_split(args.data, "test")
    sweep_l(train, test, tc, L_values, seeds, out=args.out)
    _manifest(args.out, "sweep-l", config=asdict(tc), L=L_values, seeds=seeds)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides the config file)")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    common.add_argument("--out", default="out", help="output directory (default: out)")

    configurable = argparse.ArgumentParser(add_help=False)
    configurable.add_argument("--config", help="flat key = value config file")
    configurable.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")

    p = argparse.ArgumentParser(prog="mipdesk", description="Desk-scale anti-aliased radiance fields.")
    p.add_argument("--version", action="version", version=f"mipdesk {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    v = sub.add_parser("verify", parents=[common], help="run every oracle check and write a JSON report")
    v.add_argument("--report", help="report path (default: <out>/verify.json)")
    v.add_argument("--mc-scale", type=float, default=1.0, help="multiplier on Monte-Carlo sample counts")
    v.add_argument("--mutate", choices=["sigma_t2"], help="inject a known formula error (the checks must fail)")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gen-data", parents=[common, configurable], help="render the procedural multiscale dataset")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common, configurable], help="train a model on a generated dataset")
    t.add_argument("--data", help="dataset directory from gen-data")
    t.add_argument("--quiet", action="store_true", help="no progress lines")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", parents=[common], help="render test views from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", help="dataset directory (for cameras)")
    r.add_argument("--split", default="test", choices=["train", "test"])
    r.add_argument("--scale", type=int, default=1, help="scale factor 1, 2, 4 or 8")
    r.add_argument("--supersample", type=int, default=1, help="jittered cones per pixel")
    r.add_argument("--index", type=int, help="render one view only")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM/avg2 per scale into metrics.csv")
    e.add_argument("--checkpoint", action="append", required=True, help="repeat for several methods")
    e.add_argument("--method", action="append", help="label per checkpoint")
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--scene", help="scene label for the CSV (default: data directory name)")
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--scales", default="1,2,4,8")
    e.add_argument("--supersample", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-l", parents=[common, configurable], help="test PSNR vs L for PE and IPE")
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--L", default="8,12,16,20", help="comma-separated L values")
    s.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    s.set_defaults(func=cmd_sweep_l)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, cfgio.ConfigError) as e:
        print(f"mipdesk {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, trainer.TrainingDiverged) as e:
        print(f"mipdesk {args.command}: failed: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
