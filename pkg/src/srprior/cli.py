"""``srprior`` command: train flows and latent modules, super-resolve, evaluate.

Exit codes: 0 success, 2 configuration or usage error, 3 invariant
violation (frozen-flow checksum change, corrupt checkpoint). Diagnostics
such as the exploding-inverse rate never change the exit code.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError, content_hash, file_checksum, load_model, save_checkpoint
from .config import ConfigError, read_config
from .data import (bicubic_resample, list_images, load_image, make_toy_images, read_manifest,
                   save_image, to_numpy, to_tensor)
from .fixed_scale import FixedScaleModel
from .latent_module import compute_initial_prior, predict_latent
from .metrics import EvalReport, ImageRecord, grid_score, inf_rate, lr_psnr, psnr, ssim
from .objectives import make_extractor, perceptual_loss
from .patch_flow import output_size
from .temperature import TemperatureGrid, best_temperature_map, render_map, sample_latent
from .training import FrozenFlowViolation, TrainConfig, train_flow, train_lp, write_curve

log = logging.getLogger("srprior")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3


class UsageError(Exception):
    pass


# helpers ----------------------------------------------------------------
def _image_paths(src) -> list[Path]:
    p = Path(src)
    if p.is_file() and p.suffix.lower() == ".png":
        return [p]
    if p.is_dir():
        paths = list_images(p)
    elif p.is_file():
        paths = read_manifest(p)
    else:
        raise UsageError(f"no such image directory or manifest: {src}")
    if not paths:
        raise UsageError(f"no PNG images found in {src}")
    return paths


def _manifest(args, out: Path, config=None, checkpoints=()) -> None:
    """Write the run manifest before any work starts."""
    out.mkdir(parents=True, exist_ok=True)
    ins = {k: str(v) for k, v in vars(args).items()
           if k in ("data", "lr", "hr", "sr", "flow", "lp", "prior", "config") and v is not None}
    doc = {
        "subcommand": args.command,
        "argv": args.argv,
        "config": config,
        "seeds": {"seed": getattr(args, "seed", None)},
        "inputs": ins,
        "output": str(out),
        "version": __version__,
        "torch": torch.__version__,
        "python": platform.python_version(),
        "threads": torch.get_num_threads(),
        "checkpoints": {str(c): {"file_sha256": file_checksum(c), "content_sha256": content_hash(c)}
                        for c in checkpoints if c},
    }
    (out / "run_manifest.json").write_text(json.dumps(doc, indent=2, default=str))


def _pmap(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(fn, items))


def _load_cfg(args, phase: str) -> TrainConfig:
    raw = read_config(args.config) if args.config else {}
    raw.setdefault("phase", phase)
    if raw["phase"] != phase:
        raise ConfigError(f"config phase {raw['phase']!r} does not match {phase!r}")
    if args.seed is not None:
        raw["seed"] = args.seed
    return TrainConfig.from_dict(raw)


def _diag_json(d) -> dict:
    return {"nonfinite": d.nonfinite, "first_bad_layer": d.first_bad_layer,
            "temperature_used": d.temperature_used, "kind": d.kind,
            "magnitude": d.magnitude if np.isfinite(d.magnitude) else "inf"}


def _check_scale(flow, s: float) -> None:
    if isinstance(flow, FixedScaleModel) and abs(s - flow.scale) > 1e-9:
        raise UsageError(f"fixed-scale flow only supports --scale {flow.scale}")
    if s < 1:
        raise UsageError("--scale must be >= 1")


def _out_hw(flow, x, s):
    return flow.hr_shape(x) if isinstance(flow, FixedScaleModel) else output_size(x.shape[-2:], s)


# subcommands --------------------------------------------------------------
def cmd_make_toy_data(args) -> int:
    out = Path(args.out)
    _manifest(args, out)
    imgs = make_toy_images(args.n, args.size, seed=args.seed)
    lines = []
    for i, img in enumerate(imgs):
        name = f"toy_{i:04d}.png"
        save_image(out / "hr" / name, img)
        lr = bicubic_resample(img, args.scale, "down")
        save_image(out / "lr" / name, lr)
        lines.append(f"hr/{name}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    log.info("wrote %d HR/LR pairs to %s", len(imgs), out)
    return EXIT_OK


def cmd_train_flow(args) -> int:
    cfg = _load_cfg(args, "flow")
    out = Path(args.out)
    _manifest(args, out, cfg.to_dict())
    images = [load_image(p) for p in _image_paths(args.data)]
    res = train_flow(cfg, images, log=log.info)
    write_curve(out / "curve.csv", res.curve)
    save_checkpoint(out / "flow.ckpt", res.model, extra={"train": cfg.to_dict(), "skipped": res.skipped})
    log.info("nll %.4f -> %.4f bits/dim, %d skipped steps", res.initial_loss, res.final_loss, res.skipped)
    return EXIT_OK


def cmd_train_lp(args) -> int:
    cfg = _load_cfg(args, "lp")
    out = Path(args.out)
    _manifest(args, out, cfg.to_dict(), [args.flow])
    flow_hash = file_checksum(args.flow)
    flow = load_model(args.flow, expect="flow")
    images = [load_image(p) for p in _image_paths(args.data)]
    res = train_lp(cfg, images, flow, log=log.info)
    if file_checksum(args.flow) != flow_hash:
        raise FrozenFlowViolation(f"{args.flow} changed on disk during training")
    write_curve(out / "curve.csv", res.curve)
    save_checkpoint(out / "lp.ckpt", res.model,
                    extra={"train": cfg.to_dict(), "flow_checksum": res.flow_checksum_after,
                           "skipped": res.skipped, "skip_fraction": res.skip_fraction})
    log.info("skipped %d of %d steps", res.skipped, res.steps)
    return EXIT_OK


def _load_prior(path, stem: str, shape):
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as arc:
            if stem not in arc:
                raise UsageError(f"{path} has no latent for image {stem!r}")
            arr = arc[stem]
    else:
        arr = np.load(path)
    arr = np.asarray(arr, dtype=np.float32)
    if arr.shape == tuple(shape[1:]):
        arr = arr[None]
    if arr.shape != tuple(shape):
        raise UsageError(f"prior for {stem!r} has shape {arr.shape}, need {tuple(shape)}")
    return torch.from_numpy(arr)


def _split_out(out: str):
    """``--out dir/`` or ``--out file.png`` (single image)."""
    p = Path(out)
    if p.suffix.lower() == ".png":
        return p.parent, p.name
    return p, None


def cmd_infer(args) -> int:
    out, single = _split_out(args.out)
    _manifest(args, out, checkpoints=[args.flow, args.lp])
    flow = load_model(args.flow, expect="flow")
    lp = load_model(args.lp, expect="latent") if args.lp else None
    s = args.scale if args.scale is not None else getattr(flow, "scale", None)
    if s is None:
        raise UsageError("--scale is required for the patch flow")
    _check_scale(flow, s)
    paths = _image_paths(args.lr)
    if single and len(paths) != 1:
        raise UsageError("--out names a single PNG but several inputs were given")
    diags, latents = {}, {}
    for k, path in enumerate(paths):
        x = to_tensor(load_image(path))
        out_hw = _out_hw(flow, x, s)
        shape = flow.latent_shape(x, out_hw)
        with torch.no_grad():
            if args.tau is not None:
                z = sample_latent(shape, args.tau, args.seed + k)
            elif args.prior is not None:
                z = _load_prior(args.prior, path.stem, shape)
            else:
                prior = compute_initial_prior(x, s, flow, lp.normalize_prior) if lp.uses_prior else None
                z = predict_latent(lp, flow, x, prior, s)
            if isinstance(flow, FixedScaleModel):
                y, d = flow.decode(x, z, tau=args.tau or 0.0)
            else:
                y, d = flow.decode(x, z, out_hw, tau=args.tau or 0.0, assembly=args.assembly)
        save_image(out / (single or path.name), to_numpy(y), bits=16 if args.bits16 else 8)
        diags[path.stem] = _diag_json(d[0])
        latents[path.stem] = z[0].numpy()
    if args.save_latents:
        np.savez(out / "latents.npz", **latents)
    flags = [v["nonfinite"] for v in diags.values()]
    (out / "diagnostics.json").write_text(json.dumps({"per_image": diags, "inf_percent": inf_rate(flags)}, indent=2))
    log.info("super-resolved %d images, %%Inf %.2f", len(flags), inf_rate(flags))
    return EXIT_OK


def _by_stem(paths):
    return {p.stem: p for p in paths}


def cmd_eval(args) -> int:
    out = Path(args.out)
    _manifest(args, out)
    sr = _by_stem(_image_paths(args.sr))
    hr = _by_stem(_image_paths(args.hr))
    lr = _by_stem(_image_paths(args.lr)) if args.lr else {}
    missing = sorted(set(sr) - set(hr))
    if missing:
        raise UsageError(f"no HR image for {missing[:5]}")
    flags = {}
    if args.diagnostics:
        flags = {k: v["nonfinite"] for k, v in json.loads(Path(args.diagnostics).read_text())["per_image"].items()}
    fx = make_extractor(args.extractor)

    def one(stem):
        a, b = load_image(sr[stem]), load_image(hr[stem])
        if a.shape != b.shape:
            raise UsageError(f"{stem}: SR {a.shape} and HR {b.shape} differ in size")
        with torch.no_grad():
            pd = float(perceptual_loss(to_tensor(a), to_tensor(b), fx))
        rec = ImageRecord(stem, psnr(a, b), ssim(a, b), pd, nonfinite=bool(flags.get(stem, False)),
                          grid_score=grid_score(a, args.patch_stride))
        if stem in lr:
            rec.lr_psnr = lr_psnr(a, load_image(lr[stem]), args.scale)
        return rec

    report = EvalReport(config_echo={"scale": args.scale, "extractor": args.extractor,
                                     "patch_stride": args.patch_stride})
    for rec in _pmap(one, sorted(sr), args.jobs):
        report.add(rec)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    log.info("evaluated %d images: %s", len(sr), report.aggregate)
    return EXIT_OK


def cmd_temp_map(args) -> int:
    triple = None
    if "," in args.out:
        triple = [Path(t) for t in args.out.split(",")]
        if len(triple) != 3:
            raise UsageError("--out takes a directory or map.png,assembled.png,map.npz")
        out = triple[0].parent
    else:
        out = Path(args.out)
    _manifest(args, out, checkpoints=[args.flow])
    flow = load_model(args.flow, expect="flow")
    grid = TemperatureGrid.parse(args.grid)
    hr = _by_stem(_image_paths(args.hr))
    fx = make_extractor(args.extractor)
    lrs = _image_paths(args.lr)
    if triple and len(lrs) != 1:
        raise UsageError("the map.png,assembled.png,map.npz form takes a single image")
    if len(lrs) == 1 and len(hr) == 1:
        hr = {lrs[0].stem: next(iter(hr.values()))}
    for p in lrs:
        if p.stem not in hr:
            raise UsageError(f"no HR image for {p.stem}")

    def one(item):
        k, path = item
        x = to_tensor(load_image(path))
        y = to_tensor(load_image(hr[path.stem]))
        return path.stem, best_temperature_map(flow, x, y, fx.error_map, grid, seed=args.seed + k)

    arrays = {}
    for stem, res in _pmap(one, list(enumerate(lrs)), args.jobs):
        map_png, asm_png = (triple[0], triple[1]) if triple else (out / f"{stem}_tau.png", out / f"{stem}_assembled.png")
        save_image(map_png, render_map(res.temp_map.tau), bits=16)
        save_image(asm_png, res.assembled)
        arrays[f"{stem}_tau"] = res.temp_map.tau
        arrays[f"{stem}_index"] = res.temp_map.index
        arrays[f"{stem}_error"] = res.error
    np.savez(triple[2] if triple else out / "temp_maps.npz", grid=np.asarray(grid.values), **arrays)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    out = Path(args.out)
    _manifest(args, out, checkpoints=[args.flow])
    flow = load_model(args.flow, expect="flow")
    s = args.scale if args.scale is not None else getattr(flow, "scale", None)
    if s is None:
        raise UsageError("--scale is required for the patch flow")
    _check_scale(flow, s)
    taus = TemperatureGrid.parse(args.tau).values
    try:
        scales = [float(v) for v in args.latent_scale.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --latent-scale {args.latent_scale!r}") from exc
    if not scales or any(v <= 0 for v in scales):
        raise UsageError("--latent-scale values must be > 0")
    paths = _image_paths(args.lr)

    def one(item):
        k, path = item
        x = to_tensor(load_image(path))
        out_hw = _out_hw(flow, x, s)
        rows = []
        with torch.no_grad():
            for scale in scales:
                for tau in taus:
                    for j in range(args.samples):
                        seed = args.seed + 1000 * k + j
                        z = sample_latent(flow.latent_shape(x, out_hw), tau, seed) * scale
                        d = flow.decode(x, z, out_hw, tau=tau)[1][0]
                        rows.append({"image": path.stem, "seed": seed, "latent_scale": scale, **_diag_json(d)})
        return rows

    rows = [r for chunk in _pmap(one, list(enumerate(paths)), args.jobs) for r in chunk]
    summary = {
        f"scale={c:g},tau={t:g}": inf_rate([r["nonfinite"] for r in rows
                                           if r["temperature_used"] == t and r["latent_scale"] == c])
        for c in scales for t in taus
    }
    doc = {"inf_percent_by_setting": summary,
           "inf_percent": inf_rate([r["nonfinite"] for r in rows]), "samples": rows}
    if args.report == "csv":
        with open(out / "diagnostics.csv", "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
            wr.writeheader()
            wr.writerows(rows)
    else:
        (out / "diagnostics.json").write_text(json.dumps(doc, indent=2))
    log.info("%%Inf: %s", summary)
    return EXIT_OK


# parser -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srprior", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("make-toy-data", help="write seeded procedural HR/LR pairs")
    t.add_argument("--out", required=True)
    t.add_argument("--n", type=int, default=64)
    t.add_argument("--size", type=int, default=64)
    t.add_argument("--scale", type=float, default=4.0)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_make_toy_data)

    for name, fn, phase in (("train-flow", cmd_train_flow, "flow"), ("train-lp", cmd_train_lp, "lp")):
        t = sub.add_parser(name, help=f"{phase} training")
        t.add_argument("--config", help="flat key = value config file")
        t.add_argument("--data", required=True, help="HR image directory or manifest")
        t.add_argument("--out", required=True)
        t.add_argument("--seed", type=int)
        if phase == "lp":
            t.add_argument("--flow", required=True, help="frozen flow checkpoint")
        t.set_defaults(fn=fn)

    t = sub.add_parser("infer", help="super-resolve LR images")
    t.add_argument("--flow", "--model", dest="flow", required=True, help="flow checkpoint")
    t.add_argument("--lr", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--scale", type=float)
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--tau", type=float, help="sample latents at this temperature")
    src.add_argument("--prior", help="latent file (.npy or .npz keyed by image name)")
    src.add_argument("--lp", help="latent-module checkpoint")
    t.add_argument("--assembly", choices=("tile", "center", "average"))
    t.add_argument("--save-latents", action="store_true")
    t.add_argument("--bits16", action="store_true", help="write 16-bit PNGs")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_infer)

    t = sub.add_parser("eval", help="PSNR / SSIM / feature distance / LR-PSNR / grid score")
    t.add_argument("--sr", required=True)
    t.add_argument("--hr", required=True)
    t.add_argument("--lr")
    t.add_argument("--scale", type=float, required=True)
    t.add_argument("--out", default=".")
    t.add_argument("--diagnostics", help="diagnostics.json from infer, for %%Inf")
    t.add_argument("--extractor", default="random")
    t.add_argument("--patch-stride", type=int, default=3)
    t.add_argument("--jobs", type=int, default=1)
    t.set_defaults(fn=cmd_eval)

    t = sub.add_parser("temp-map", help="per-pixel best-temperature search")
    t.add_argument("--flow", "--model", dest="flow", required=True)
    t.add_argument("--lr", required=True)
    t.add_argument("--hr", required=True)
    t.add_argument("--out", required=True, help="directory, or map.png,assembled.png,map.npz")
    t.add_argument("--grid", default="0:1:0.05")
    t.add_argument("--extractor", default="random")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--jobs", type=int, default=1)
    t.set_defaults(fn=cmd_temp_map)

    t = sub.add_parser("diagnose", help="exploding-inverse rate of sampled latents")
    t.add_argument("--flow", "--model", dest="flow", required=True)
    t.add_argument("--lr", "--dir", dest="lr", required=True)
    t.add_argument("--out", default=".")
    t.add_argument("--scale", type=float)
    t.add_argument("--tau", "--taus", dest="tau", default="0.8", help="temperature or list, e.g. 0.8,0.9,1.0")
    t.add_argument("--latent-scale", default="1", help="latent multiplier or list, e.g. 1,10,100")
    t.add_argument("--report", choices=("json", "csv"), default="json")
    t.add_argument("--samples", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--jobs", type=int, default=1)
    t.set_defaults(fn=cmd_diagnose)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.fn(args)
    except (FrozenFlowViolation, CheckpointError) as exc:
        log.error("invariant violation: %s", exc)
        return EXIT_INVARIANT
    except (ConfigError, UsageError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
