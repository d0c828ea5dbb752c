"""Command-line entry points: train, downscale, eval, ablate, bench.

Every command accepts ``--config FILE`` with ``key=value`` lines using the
long flag names (dashes or underscores).  Flags given on the command line
override the file; unknown keys are errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .data import GENERATORS, DatasetError, DatasetManifest, load_pairs, read_png, split_validation, synth_pairs, write_png
from .metrics import MetricReport
from .model import NORM_MODES, VARIANTS, ModelConfig, average_kernels, build, count_parameters, forward, predict_kernels
from .resample import METHODS, apply_kernels, bicubic_upscale, classic_downscale
from .train import TrainConfig, Trainer

logger = logging.getLogger("adknet")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# option handling

COMMON = {"config": None, "verbose": False}

TRAIN_DEFAULTS = {
    "manifest": None,
    "synth": None,
    "synth_count": 32,
    "hr_size": 96,
    "scale": 2,
    "variant": "full",
    "norm_mode": "minmax_sum",
    "width": 64,
    "kernel_size": None,
    "backbone_blocks": 4,
    "trunk_blocks": 3,
    "branch_blocks": 2,
    "epochs": 100,
    "max_steps": None,
    "lr": 1e-4,
    "patience": 10,
    "batch": 4,
    "patch": 192,
    "seed": 0,
    "eval_every": 1,
    "out": "runs/adknet",
}

DOWNSCALE_DEFAULTS = {"ckpt": None, "input": None, "out": None, "dump_kernels": None}

EVAL_DEFAULTS = {
    "pred_dir": None,
    "ckpt": None,
    "manifest": None,
    "gt_dir": None,
    "hr_dir": None,
    "scale": None,
    "roundtrip": False,
    "records": None,
}

ABLATE_DEFAULTS = {
    "manifest": None,
    "synth": "box",
    "synth_count": 32,
    "hr_size": 96,
    "scale": 2,
    "budget": 400,
    "width": 16,
    "kernel_size": None,
    "backbone_blocks": 4,
    "trunk_blocks": 3,
    "branch_blocks": 2,
    "lr": 1e-4,
    "batch": 4,
    "patch": 48,
    "seed": 0,
    "records": None,
}

BENCH_DEFAULTS = {"ckpt": None, "size": [64], "iters": 5, "scale": 2, "width": 16, "seed": 0, "records": None}

DEFAULTS = {
    "train": TRAIN_DEFAULTS,
    "downscale": DOWNSCALE_DEFAULTS,
    "eval": EVAL_DEFAULTS,
    "ablate": ABLATE_DEFAULTS,
    "bench": BENCH_DEFAULTS,
}


def read_config_file(path, allowed) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "in":
            key = "input"
        if key not in allowed:
            raise CliError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise CliError(f"not a boolean: {value!r}")
    if isinstance(default, list):
        return [int(v) for v in value.replace(",", " ").split()]
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and explicit flags (in that order)."""
    defaults = DEFAULTS[command]
    opts = dict(defaults)
    given = vars(ns)
    if given.get("config"):
        file_values = read_config_file(given["config"], defaults)
        for key, raw in file_values.items():
            opts[key] = _coerce(raw, defaults[key]) if defaults[key] is not None else _infer(raw)
    for key, value in given.items():
        if key in defaults:
            opts[key] = value
    return opts


def _infer(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def _flag(p, name, **kw):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adknet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key=value file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = command("train", "train a model on a manifest or a synthetic dataset")
    _flag(p, "manifest", help="key=value dataset manifest (hr_dir, lr_dir, scale, split)")
    _flag(p, "synth", choices=GENERATORS, help="train on synthetic pairs made with this downscaler")
    _flag(p, "synth_count", type=int)
    _flag(p, "hr_size", type=int)
    _flag(p, "scale", type=int)
    _flag(p, "variant", choices=VARIANTS)
    _flag(p, "norm_mode", choices=NORM_MODES)
    _flag(p, "width", type=int, help="feature channels C")
    _flag(p, "kernel_size", type=int, help="defaults to 2*scale+1")
    _flag(p, "backbone_blocks", type=int)
    _flag(p, "trunk_blocks", type=int)
    _flag(p, "branch_blocks", type=int)
    _flag(p, "epochs", type=int)
    _flag(p, "max_steps", type=int)
    _flag(p, "lr", type=float)
    _flag(p, "patience", type=int, help="plateau patience in evaluations")
    _flag(p, "batch", type=int)
    _flag(p, "patch", type=int, help="HR crop size")
    _flag(p, "seed", type=int)
    _flag(p, "eval_every", type=int)
    _flag(p, "out", help="output directory")

    p = command("downscale", "downscale one image with a trained checkpoint")
    _flag(p, "ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    _flag(p, "out", required=True)
    _flag(p, "dump_kernels", help="directory for per-channel averaged kernel maps")

    p = command("eval", "PSNR/SSIM table against ground-truth LR images")
    _flag(p, "pred_dir")
    _flag(p, "ckpt")
    _flag(p, "manifest")
    _flag(p, "gt_dir", help="ground-truth LR directory")
    _flag(p, "hr_dir", help="HR directory (for baselines and --ckpt)")
    _flag(p, "scale", type=int)
    _flag(p, "roundtrip", action="store_true", help="downscale, bicubic-upscale and compare with HR")
    _flag(p, "records", help="write line-delimited JSON records here")

    p = command("ablate", "train every ablation variant under one budget")
    _flag(p, "manifest")
    _flag(p, "synth", choices=GENERATORS)
    _flag(p, "synth_count", type=int)
    _flag(p, "hr_size", type=int)
    _flag(p, "scale", type=int)
    _flag(p, "budget", type=int, help="optimization steps per variant")
    _flag(p, "width", type=int)
    _flag(p, "kernel_size", type=int)
    _flag(p, "backbone_blocks", type=int)
    _flag(p, "trunk_blocks", type=int)
    _flag(p, "branch_blocks", type=int)
    _flag(p, "lr", type=float)
    _flag(p, "batch", type=int)
    _flag(p, "patch", type=int)
    _flag(p, "seed", type=int)
    _flag(p, "records")

    p = command("bench", "time forward and kernel application")
    _flag(p, "ckpt", help="checkpoint to time (a fresh model otherwise)")
    _flag(p, "size", type=int, nargs="+", help="HR square sizes")
    _flag(p, "iters", type=int)
    _flag(p, "scale", type=int)
    _flag(p, "width", type=int)
    _flag(p, "seed", type=int)
    _flag(p, "records")
    return parser


# ---------------------------------------------------------------------------
# shared helpers


def _dataset(opts) -> list:
    if opts.get("manifest"):
        manifest = DatasetManifest.from_file(opts["manifest"])
        if manifest.scale != opts["scale"]:
            raise CliError(f"manifest scale {manifest.scale} differs from --scale {opts['scale']}")
        pairs = load_pairs(manifest)
    elif opts.get("synth"):
        pairs = synth_pairs(opts["synth_count"], opts["hr_size"], opts["scale"], opts["synth"], rng=opts["seed"])
    else:
        raise CliError("give --manifest or --synth")
    if not pairs:
        raise CliError("dataset is empty")
    return pairs


def _model_config(opts, **override) -> ModelConfig:
    values = dict(
        scale=opts["scale"],
        width=opts["width"],
        kernel_size=opts.get("kernel_size"),
        backbone_blocks=opts["backbone_blocks"],
        trunk_blocks=opts["trunk_blocks"],
        branch_blocks=opts["branch_blocks"],
        variant=opts.get("variant", "full"),
        norm_mode=opts.get("norm_mode", "minmax_sum"),
        seed=opts["seed"],
    )
    values.update(override)
    return ModelConfig(**values)


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return f"{v:.4f}"
    return str(v)


def format_table(rows: list[dict], columns: list[str]) -> str:
    cells = [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _write_records(path, rows) -> None:
    if not path:
        return
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def _crop_divisible(img: np.ndarray, s: int) -> tuple[np.ndarray, bool]:
    h, w = img.shape[:2]
    hc, wc = h - h % s, w - w % s
    return img[:hc, :wc], (hc, wc) != (h, w)


# ---------------------------------------------------------------------------
# commands


def cmd_train(opts) -> int:
    pairs = _dataset(opts)
    train_set, val_set = split_validation(pairs)
    mc = _model_config(opts)
    patch = min(opts["patch"], *(min(p.hr.shape[:2]) for p in pairs))
    tc = TrainConfig(
        lr0=opts["lr"],
        plateau_patience=opts["patience"],
        epochs=opts["epochs"],
        batch=opts["batch"],
        patch=patch - patch % mc.scale,
        seed=opts["seed"],
        checkpoint_dir=opts["out"],
        eval_every=opts["eval_every"],
    )
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    log = out / "train_log.jsonl"
    if log.exists():
        log.unlink()
    trainer = Trainer(mc, train_set, val_set, tc)
    state = trainer.fit(max_steps=opts["max_steps"])
    trainer.save(out / "last.adkn")
    if not (out / "best.adkn").exists():
        trainer.save(out / "best.adkn")
    print(f"trained {state.step} steps over {state.epoch} epochs; checkpoints in {out}")
    if state.history:
        last = state.history[-1]
        print(f"final train_loss={_fmt(last['train_loss'])} val_loss={_fmt(last['val_loss'])} lr={last['lr']:g}")
    return 0


def dump_kernel_maps(kernels, directory, zoom: int = 16) -> dict:
    """Write per-channel spatially averaged kernels as PNGs plus raw JSON values."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    avg = average_kernels(kernels)
    raw = {}
    for name, kern in zip("RGB", avg):
        lo, hi = kern.min(), kern.max()
        vis = (kern - lo) / (hi - lo) if hi > lo else np.zeros_like(kern)
        vis = np.kron(vis, np.ones((zoom, zoom)))
        write_png(directory / f"kernel_{name}.png", vis[:, :, None])
        raw[name] = kern.tolist()
    (directory / "kernels.json").write_text(json.dumps(raw, indent=1))
    return raw


def cmd_downscale(opts) -> int:
    ckpt = load_checkpoint(opts["ckpt"])
    s = ckpt.config.scale
    img = read_png(opts["input"])
    img, cropped = _crop_divisible(img, s)
    if cropped:
        print(f"note: cropped input to {img.shape[0]}x{img.shape[1]} (divisible by scale {s})", file=sys.stderr)
    if min(img.shape[:2]) < ckpt.config.kernel_size:
        raise CliError(f"input is smaller than the {ckpt.config.kernel_size}px kernel")
    with T.no_grad():
        out, kernels = forward(img, ckpt.params, ckpt.config)
    write_png(opts["out"], out.data)
    print(f"wrote {opts['out']} ({out.shape[0]}x{out.shape[1]}, scale {s})")
    if opts.get("dump_kernels"):
        dump_kernel_maps(kernels, opts["dump_kernels"])
        print(f"kernel maps in {opts['dump_kernels']}")
    return 0


def _png_map(directory) -> dict:
    return {p.stem: p for p in sorted(Path(directory).glob("*.png"))}


def cmd_eval(opts) -> int:
    if opts.get("manifest"):
        manifest = DatasetManifest.from_file(opts["manifest"])
        opts["hr_dir"] = opts.get("hr_dir") or str(manifest.hr_dir)
        opts["gt_dir"] = opts.get("gt_dir") or str(manifest.lr_dir)
        opts["scale"] = opts.get("scale") or manifest.scale
    ckpt = load_checkpoint(opts["ckpt"]) if opts.get("ckpt") else None
    if ckpt is not None:
        if opts.get("scale") and opts["scale"] != ckpt.config.scale:
            raise CliError(f"checkpoint scale {ckpt.config.scale} differs from requested scale {opts['scale']}")
        opts["scale"] = ckpt.config.scale

    report = MetricReport()
    if opts["roundtrip"]:
        if not opts.get("hr_dir") or not opts.get("scale"):
            raise CliError("--roundtrip needs --hr-dir and --scale (or a checkpoint)")
        s = opts["scale"]
        for stem, path in _png_map(opts["hr_dir"]).items():
            hr, _ = _crop_divisible(read_png(path), s)
            methods = {m: classic_downscale(hr, s, m) for m in METHODS}
            if ckpt is not None:
                with T.no_grad():
                    methods["adknet"] = forward(hr, ckpt.params, ckpt.config)[0].data
            for method, lr in methods.items():
                report.add(stem, bicubic_upscale(np.clip(lr, 0, 1), s), hr, method=method, mode="roundtrip")
    else:
        if not opts.get("gt_dir"):
            raise CliError("eval needs --gt-dir (or --manifest)")
        if not opts.get("pred_dir") and ckpt is None:
            raise CliError("eval needs --pred-dir or --ckpt")
        if not opts.get("hr_dir"):
            raise CliError("eval needs --hr-dir (or --manifest) for the classical baseline rows")
        gt = _png_map(opts["gt_dir"])
        hr_files = _png_map(opts["hr_dir"])
        preds = _png_map(opts["pred_dir"]) if opts.get("pred_dir") else {}
        for stem, gt_path in gt.items():
            target = read_png(gt_path)
            if stem not in hr_files:
                raise CliError(f"{gt_path}: no HR image with basename {stem!r}")
            hr = read_png(hr_files[stem])
            s = opts.get("scale") or hr.shape[0] // target.shape[0]
            if hr.shape[0] != s * target.shape[0] or hr.shape[1] != s * target.shape[1]:
                raise CliError(f"{hr_files[stem]} and {gt_path} are not related by scale {s}")
            if ckpt is not None:
                with T.no_grad():
                    pred = forward(hr, ckpt.params, ckpt.config)[0].data
                report.add(stem, pred, target, method="adknet", mode="downscale")
            if preds:
                if stem not in preds:
                    raise CliError(f"no prediction for {stem!r} in {opts['pred_dir']}")
                report.add(stem, read_png(preds[stem]), target, method="pred", mode="downscale")
            for m in METHODS:
                report.add(stem, classic_downscale(hr, s, m), target, method=m, mode="downscale")

    columns = ["image", "method", "psnr_rgb", "ssim_rgb", "psnr_y", "ssim_y"]
    means = []
    for method in dict.fromkeys(r["method"] for r in report.rows):
        sub = MetricReport([r for r in report.rows if r["method"] == method])
        means.append({"image": "MEAN", "method": method, **sub.summary()})
    print(format_table(report.rows + means, columns))
    print("(no border cropping; Y = BT.601 luma)")
    _write_records(opts.get("records"), report.rows + means)
    return 0


ABLATIONS = [
    ("Full", "full", "minmax_sum"),
    ("SharedTrunk", "shared_trunk", "minmax_sum"),
    ("SingleStream", "single_stream", "minmax_sum"),
    ("SimpleGen", "simple_gen", "minmax_sum"),
    ("SumOnly", "full", "sum_only"),
    ("MinMaxOnly", "full", "minmax_only"),
]


def run_ablation(opts, pairs=None) -> list[dict]:
    pairs = pairs if pairs is not None else _dataset(opts)
    train_set, val_set = split_validation(pairs)
    patch = min(opts["patch"], *(min(p.hr.shape[:2]) for p in pairs))
    rows = []
    for name, variant, norm in ABLATIONS:
        mc = _model_config(opts, variant=variant, norm_mode=norm)
        tc = TrainConfig(
            lr0=opts["lr"], epochs=10**9, batch=opts["batch"], patch=patch - patch % mc.scale,
            seed=opts["seed"], eval_every=10**9,
        )
        trainer = Trainer(mc, train_set, val_set, tc)
        trainer.fit(max_steps=opts["budget"])
        val = trainer.validate()
        rows.append(
            {
                "name": name,
                "variant": variant,
                "norm_mode": norm,
                "params": count_parameters(trainer.params),
                "steps": trainer.state.step,
                "seed": opts["seed"],
                "val_l1": val["val_loss"],
                "val_psnr": val["val_psnr"],
            }
        )
        logger.info("ablation %s: %s", name, rows[-1])
    return rows


def cmd_ablate(opts) -> int:
    rows = run_ablation(opts)
    print(format_table(rows, ["name", "variant", "norm_mode", "params", "steps", "val_l1", "val_psnr"]))
    full = next(r for r in rows if r["name"] == "Full")
    single = next(r for r in rows if r["name"] == "SingleStream")
    holds = full["val_l1"] <= single["val_l1"]
    print(f"observation: full val L1 {'<=' if holds else '>'} single-stream val L1 ({_fmt(full['val_l1'])} vs {_fmt(single['val_l1'])})")
    _write_records(opts.get("records"), rows)
    return 0


def _timed(fn, iters):
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return samples


def bench(params, config: ModelConfig, sizes, iters: int, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    s = config.scale
    for size in sizes:
        size -= size % s
        img = T.tensor(rng.random((size, size, 3)))
        with T.no_grad():
            kernels = predict_kernels(img, params, config)[0]
            fwd = _timed(lambda: forward(img, params, config), iters)
            app = _timed(lambda: apply_kernels(img, kernels, s), iters)
        for what, samples in (("forward", fwd), ("apply_kernels", app)):
            rows.append(
                {
                    "op": what,
                    "size": size,
                    "scale": s,
                    "kernel_size": config.kernel_size,
                    "iters": iters,
                    "samples": len(samples),
                    "min_s": float(np.min(samples)),
                    "median_s": float(np.median(samples)),
                    "p95_s": float(np.percentile(samples, 95)),
                }
            )
    return rows


def cmd_bench(opts) -> int:
    if opts.get("ckpt"):
        ckpt = load_checkpoint(opts["ckpt"])
        config, params = ckpt.config, ckpt.params
    else:
        config = ModelConfig(scale=opts["scale"], width=opts["width"], seed=opts["seed"])
        params = build(config)
    sizes = opts["size"] if isinstance(opts["size"], list) else [opts["size"]]
    rows = bench(params, config, sizes, opts["iters"], opts["seed"])
    print(format_table(rows, ["op", "size", "scale", "kernel_size", "samples", "median_s", "p95_s"]))
    _write_records(opts.get("records"), rows)
    return 0


COMMANDS = {
    "train": cmd_train,
    "downscale": cmd_downscale,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING)
    try:
        opts = resolve(ns.command, ns)
        return COMMANDS[ns.command](opts)
    except (CliError, DatasetError, ValueError, OSError, T.NonFiniteError) as exc:
        print(f"adknet {ns.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
