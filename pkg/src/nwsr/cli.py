"""``nwsr`` command line: simulate, reconstruct, train, eval, compare, gradcheck, grid.

Errors print one line ``error: <kind>: <message>`` on stderr; usage errors
exit 2, data errors exit 1. Every output directory gets one ``manifest.json``;
commands writing a single file put ``<file>.manifest.json`` next to it.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from nwsr import __version__, baseline, experiment, gradcheck, iqa, pipeline, simulate
from nwsr.config import ConfigError, load_config
from nwsr.imaging import normalize_frame, read_layout_csv, read_png, write_png
from nwsr.network import save_checkpoint

log = logging.getLogger("nwsr")

VERSION = f"nwsr {__version__}"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- manifests ------------------------------------------------------------


class Manifest:
    def __init__(self, command, args):
        self.command = command
        self.argv = list(getattr(args, "argv", []))
        self.config = {k: v for k, v in vars(args).items() if k not in ("func", "argv")}
        self.seeds = {}
        self.artifacts = []
        self.started = dt.datetime.now(dt.timezone.utc)
        self._t0 = time.perf_counter()

    def write(self, path):
        doc = {
            "tool": "nwsr",
            "version": VERSION,
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seeds": self.seeds,
            "artifacts": sorted(str(a) for a in self.artifacts),
            "started": self.started.isoformat(timespec="seconds"),
            "wall_clock_s": round(time.perf_counter() - self._t0, 3),
        }
        Path(path).write_text(json.dumps(doc, indent=2, default=str) + "\n")


def _out_dir(path):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _sidecar(path):
    p = Path(path)
    return p.with_name(p.name + ".manifest.json")


# --- helpers --------------------------------------------------------------


def parse_layout(spec):
    """``gen:radius,spacing,seed`` or a layout CSV path."""
    if spec.startswith("gen:"):
        try:
            r, s, seed = spec[4:].split(",")
            r, s, seed = float(r), float(s), int(seed)
        except ValueError:
            raise UsageError(f"--layout gen: expects radius,spacing,seed, got {spec[4:]!r}") from None
        return simulate.generate_layout(r, s, seed)
    return read_layout_csv(spec)


def parse_size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size expects WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise UsageError("--size must be positive")
    return w, h


def _frames(directory, prefix):
    files = sorted(Path(directory).glob(f"{prefix}_*.png"))
    if not files:
        raise ValueError(f"{directory}: no {prefix}_####.png files")
    return {f.stem[len(prefix) + 1 :]: f for f in files}


def _write_rgb(path, rgb):
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path)


# --- commands -------------------------------------------------------------


def cmd_make_sources(args):
    out = _out_dir(args.out_dir)
    man = Manifest("make-sources", args)
    man.seeds["sources"] = list(range(args.seed, args.seed + args.count))
    for i, s in enumerate(man.seeds["sources"]):
        name = f"source_{i:04d}.png"
        _write_rgb(out / name, simulate.synthetic_source(args.size, s))
        man.artifacts.append(name)
    man.write(out / "manifest.json")


def cmd_simulate(args):
    layout = parse_layout(args.layout)
    sources = []
    for p in args.input:
        img = read_png(p)
        sources.append(simulate.to_grayscale(img) if img.ndim == 3 else img)
    noise = simulate.NoiseParams(args.sigma_mult, args.sigma_add, args.seed)
    ds = pipeline.simulate_dataset(sources, layout, noise)
    if not ds.frames:
        raise ValueError("sources are smaller than the fibre bundle box; no frames")
    out = _out_dir(args.out_dir)
    pipeline.write_dataset(ds, out)
    man = Manifest("simulate", args)
    man.seeds["noise"] = args.seed
    man.artifacts = [p.name for p in out.iterdir() if p.name != "manifest.json"]
    man.write(out / "manifest.json")
    print(f"{len(ds.frames)} frames, {len(layout)} fibres -> {out}")


def cmd_reconstruct(args):
    layout = read_layout_csv(args.layout)
    signals = pipeline.read_signals_csv(args.signals)
    if len(signals) != len(layout):
        raise ValueError(f"{len(signals)} signals for a layout of {len(layout)} fibres")
    w, h = parse_size(args.size)
    if args.method == "delaunay":
        img = baseline.interpolate_linear(signals, baseline.delaunay_triangulate(layout), w, h)
    else:
        sigma = args.sigma if args.sigma is not None else baseline.default_sigma(pipeline.mean_spacing(layout))
        img = baseline.nw_gaussian_reconstruct(signals, layout, sigma, w, h)
    if not args.no_fov_mask:
        img = img * layout.fov_mask(w, h)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_png(args.out, img)
    man = Manifest("reconstruct", args)
    man.artifacts = [Path(args.out).name]
    man.write(_sidecar(args.out))


def cmd_train(args):
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as e:
        raise ValueError(f"config: {e}") from None
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads:
        cfg.workers = min(args.threads, cfg.population)
    for key in ("train_dir", "val_dir", "test_dir"):
        if not getattr(cfg, key):
            raise ValueError(f"config: {key} is required")
    train_ds, val_ds = pipeline.read_dataset(cfg.train_dir), pipeline.read_dataset(cfg.val_dir)
    test_ds = pipeline.read_dataset(cfg.test_dir)
    out = _out_dir(args.out_dir)
    res = experiment.train_mode(cfg, args.mode, train_ds, val_ds)
    save_checkpoint(res.best.net, out / "model", {"mode": args.mode, "val_loss": res.best.val_loss, "lr": res.best.adam.lr})
    experiment.write_history_csv(out / "history.csv", res.history)
    (out / "config.txt").write_text(cfg.to_text())
    sr_dir = out / "sr"
    sr_dir.mkdir(exist_ok=True)
    for i, img in enumerate(pipeline.predict_dataset(res.best.net, test_ds, args.mode, np.dtype(cfg.dtype))):
        write_png(sr_dir / f"sr_{i:04d}.png", img)
    man = Manifest("train", args)
    man.config["run"] = cfg.to_text().splitlines()
    man.seeds = {"pbt": cfg.seed, "members": [cfg.seed + i for i in range(cfg.population)]}
    man.artifacts = ["model.json", "model.bin", "history.csv", "config.txt"] + [f"sr/{p.name}" for p in sorted(sr_dir.iterdir())]
    man.write(out / "manifest.json")
    print(f"best member {res.best.id}, val loss {res.best.val_loss:.6f} -> {out}")


def load_eval_pairs(sr_dir, hr_dir, lr_dir=None, domain="normalized"):
    sr, hr = _frames(sr_dir, "sr"), _frames(hr_dir, "hr")
    if set(sr) != set(hr):
        raise ValueError(f"frame sets differ: {len(sr)} SR vs {len(hr)} HR frames")
    names = sorted(sr)
    preds, refs = [], []
    lrs = _frames(lr_dir or hr_dir, "lr") if domain == "normalized" else {}
    for n in names:
        p, r = read_png(sr[n]), read_png(hr[n])
        if domain == "normalized":
            if n not in lrs:
                raise ValueError(f"no lr_{n}.png for normalisation")
            _, r, st = normalize_frame(read_png(lrs[n]), r)
            p = st.apply(p)
        preds.append(p)
        refs.append(r)
    return names, preds, refs


def cmd_eval(args):
    names, preds, refs = load_eval_pairs(args.sr_dir, args.hr_dir, args.lr_dir, args.domain)
    report = iqa.evaluate_frames(preds, refs, args.data_range, names)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    iqa.write_report_csv(args.out, report)
    man = Manifest("eval", args)
    man.artifacts = [Path(args.out).name]
    man.write(_sidecar(args.out))
    inf = f" ({report.n_inf} frames with infinite PSNR excluded)" if report.n_inf else ""
    print(f"PSNR {report.psnr_mean:.3f} ± {report.psnr_std:.3f} dB, SSIM {report.ssim_mean:.4f} ± {report.ssim_std:.4f}{inf}")


def cmd_compare(args):
    if len(args.report) < 2:
        raise UsageError("compare needs at least two --report NAME=CSV entries")
    reports = {}
    for item in args.report:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--report expects NAME=CSV, got {item!r}")
        if not Path(path).exists():
            raise ValueError(f"missing report {path}")
        _, summary = iqa.read_report_csv(path)
        if "mean" not in summary or "std" not in summary:
            raise ValueError(f"{path}: missing mean/std summary rows")
        (pm, sm), (ps, ss) = summary["mean"], summary["std"]
        reports[name] = (sm, ss, pm, ps)
    table = experiment.format_table(reports)
    print(table)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        experiment.write_table_csv(args.out, reports)
        man = Manifest("compare", args)
        man.artifacts = [Path(args.out).name]
        man.write(_sidecar(args.out))


def cmd_gradcheck(args):
    if args.layer == "nw":
        err = gradcheck.check_nw(args.cin, args.t, args.k, args.seed)
    elif args.layer == "conv":
        err = gradcheck.check_conv(args.cin, args.t, args.k, args.seed)
    elif args.layer == "loss":
        err = gradcheck.check_loss(args.seed)
    else:
        err = gradcheck.check_network(args.arch, args.blocks, args.filters, args.seed, n=args.coords)
    print(f"max relative error {err:.3e}")
    if err >= args.tol:
        raise ValueError(f"gradient check failed: {err:.3e} >= {args.tol:g}")


def cmd_grid(args):
    """HR | LR | INTER | NW GAUSS | models side by side for selected frames."""
    ds = pipeline.read_dataset(args.dataset)
    n = len(ds.frames)
    frames = args.frames or list(range(min(n, 3)))
    if any(i < 0 or i >= n for i in frames):
        raise ValueError(f"frame index out of range (dataset has {n} frames)")
    sub = pipeline.Dataset([ds.frames[i] for i in frames], ds.layout)
    cols = [[f.hr for f in sub.frames], [f.lr for f in sub.frames]]
    cols += list(experiment.baseline_outputs(sub).values())
    for item in args.sr:
        name, _, d = item.partition("=")
        sr = _frames(d or name, "sr")
        cols.append([read_png(sr[f"{i:04d}"]) for i in frames])
    h, w = ds.shape
    pad = 2
    canvas = np.ones((len(frames) * (h + pad) - pad, len(cols) * (w + pad) - pad))
    for c, col in enumerate(cols):
        for r, img in enumerate(col):
            canvas[r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = img
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_png(args.out, canvas, bits=8)
    man = Manifest("grid", args)
    man.artifacts = [Path(args.out).name]
    man.write(_sidecar(args.out))


# --- parser ---------------------------------------------------------------


def build_parser():
    p = _Parser(prog="nwsr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=VERSION)
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS threads and parallel PBT members")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-sources", help="write synthetic H&E-like RGB source images")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_make_sources)

    s = sub.add_parser("simulate", help="simulate HR/LR/sparse frames from source images")
    s.add_argument("--input", nargs="+", required=True, help="source PNG(s); each becomes one video")
    s.add_argument("--layout", required=True, help="layout CSV or gen:radius,spacing,seed")
    s.add_argument("--sigma-mult", type=float, default=0.1)
    s.add_argument("--sigma-add", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0, help="noise seed")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("reconstruct", help="baseline reconstruction from fibre signals")
    s.add_argument("--method", choices=("delaunay", "nwgauss"), required=True)
    s.add_argument("--signals", required=True, help="CSV with a 'signal' header, one value per fibre")
    s.add_argument("--layout", required=True)
    s.add_argument("--size", required=True, help="WxH")
    s.add_argument("--sigma", type=float, default=None, help="NW GAUSS bandwidth (default 0.7 x spacing)")
    s.add_argument("--no-fov-mask", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("train", help="PBT training of one model variant")
    s.add_argument("--config", required=True)
    s.add_argument("--mode", choices=pipeline.MODES, required=True)
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="PSNR/SSIM of sr_####.png against hr_####.png")
    s.add_argument("--sr-dir", required=True)
    s.add_argument("--hr-dir", required=True)
    s.add_argument("--lr-dir", default=None, help="LR frames for normalisation (default: --hr-dir)")
    s.add_argument("--domain", choices=("normalized", "raw"), default="normalized")
    s.add_argument("--data-range", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="comparison table of evaluation reports")
    s.add_argument("--report", action="append", default=[], metavar="NAME=CSV")
    s.add_argument("--out", default=None, help="optional CSV of the table")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check")
    s.add_argument("--layer", choices=("nw", "conv", "loss", "net"), default="nw")
    s.add_argument("--cin", type=int, default=2)
    s.add_argument("--t", type=int, default=3)
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--arch", choices=("cnnnet_sr", "nwnet_sr"), default="nwnet_sr")
    s.add_argument("--blocks", type=int, default=4)
    s.add_argument("--filters", type=int, default=16)
    s.add_argument("--coords", type=int, default=200)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("grid", help="side-by-side PNG: HR | LR | INTER | NW GAUSS | models")
    s.add_argument("--dataset", required=True)
    s.add_argument("--frames", type=int, nargs="*", default=None)
    s.add_argument("--sr", action="append", default=[], metavar="NAME=DIR")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_grid)
    return p


def _positive(args):
    for key in ("count", "size", "cin", "t", "coords", "blocks", "filters", "threads"):
        v = getattr(args, key, None)
        if isinstance(v, int) and v < 1:
            raise UsageError(f"--{key} must be >= 1")
    if getattr(args, "k", 0) < 0:
        raise UsageError("--k must be >= 0")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        _positive(args)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as e:
        msg = " ".join(str(e).split())
        print(f"error: data: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
