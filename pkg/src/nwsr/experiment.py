"""Desk-scale comparison of INTER, NW GAUSS and the three trained models.

Synthetic H&E-like sources are split into disjoint train / validation /
test groups (separate source seeds), simulated through one shared fibre
layout, and every method is scored on the test frames in the normalised
domain (LR statistics, data range 1).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from nwsr import iqa, pipeline, simulate
from nwsr.config import RunConfig
from nwsr.network import ArchSpec
from nwsr.train import pbt_run

log = logging.getLogger(__name__)

BASELINES = ("INTER", "NW GAUSS")
MODELS = {"CART": "cart", "SPARSE": "sparse", "NW": "nw"}


@dataclass
class DeskConfig:
    n_train: int = 24
    n_val: int = 4
    n_test: int = 10
    source_size: int = 240
    fov_radius: float = 60.0
    spacing: float = 2.5
    layout_seed: int = 7
    noise: simulate.NoiseParams = field(default_factory=lambda: simulate.NoiseParams(seed=11))
    run: RunConfig = field(
        default_factory=lambda: RunConfig(
            blocks=4,
            filters=16,
            population=6,
            iterations=20,
            perturbation_interval=5,
            batch_size=8,
            lr_grid=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7),
            dtype="float32",
        )
    )

    # disjoint source-seed ranges per split
    def seeds(self, split):
        base = {"train": 1000, "val": 2000, "test": 3000}[split]
        n = {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]
        return range(base, base + n)


def make_sources(seeds, size):
    return [simulate.to_grayscale(simulate.synthetic_source(size, s)) for s in seeds]


def build_datasets(cfg: DeskConfig):
    layout = simulate.generate_layout(cfg.fov_radius, cfg.spacing, cfg.layout_seed)
    return {
        split: pipeline.simulate_dataset(make_sources(cfg.seeds(split), cfg.source_size), layout, cfg.noise)
        for split in ("train", "val", "test")
    }


def spec_for(run: RunConfig, mode):
    return ArchSpec(pipeline.arch_for(mode), run.blocks, run.filters, run.nw_depth, 1, run.seed)


def train_mode(run: RunConfig, mode, train_ds, val_ds):
    """PBT on the patches of `train_ds`; returns the `PBTResult`."""
    t0 = time.perf_counter()
    res = pbt_run(
        run.pbt(),
        pipeline.patches_for(train_ds, mode),
        pipeline.patches_for(val_ds, mode),
        spec_for(run, mode),
    )
    log.info("%s: trained in %.0f s, best member %d (val %.4f)", mode, time.perf_counter() - t0, res.best.id, res.best.val_loss)
    return res


def baseline_outputs(ds, sigma=None):
    return {
        "INTER": pipeline.reconstruct_dataset(ds, "delaunay"),
        "NW GAUSS": pipeline.reconstruct_dataset(ds, "nwgauss", sigma),
    }


def score(ds, outputs) -> iqa.IQAReport:
    pred, ref = pipeline.evaluation_pairs(ds, outputs)
    return iqa.evaluate_frames(pred, ref, 1.0, [f"{i:04d}" for i in range(len(pred))])


def desk_compare(cfg: DeskConfig, modes=("cart", "sparse", "nw")):
    """Run the whole comparison; returns ``{method: IQAReport}`` and the PBT results."""
    data = build_datasets(cfg)
    test = data["test"]
    reports = {name: score(test, out) for name, out in baseline_outputs(test, cfg.run.sigma).items()}
    results = {}
    for name, mode in MODELS.items():
        if mode not in modes:
            continue
        res = train_mode(cfg.run, mode, data["train"], data["val"])
        results[name] = res
        reports[name] = score(test, pipeline.predict_dataset(res.best.net, test, mode, np.dtype(cfg.run.dtype)))
        log.info("%s: PSNR %.2f SSIM %.4f", name, reports[name].psnr_mean, reports[name].ssim_mean)
    return reports, results


def summary_row(report: iqa.IQAReport):
    return (report.ssim_mean, report.ssim_std, report.psnr_mean, report.psnr_std)


def format_table(rows):
    """Plain-text comparison table from ``{method: (ssim_mean, ssim_std, psnr_mean, psnr_std)}``."""
    rows = {k: (summary_row(v) if isinstance(v, iqa.IQAReport) else v) for k, v in rows.items()}
    w = max(len("Method"), *(len(k) for k in rows))
    lines = [f"{'Method':<{w}}  {'SSIM':>15}  {'PSNR (dB)':>15}"]
    for name, (sm, ss, pm, ps) in rows.items():
        lines.append(f"{name:<{w}}  {sm:7.3f} ± {ss:5.3f}  {pm:7.2f} ± {ps:5.2f}")
    return "\n".join(lines)


def write_table_csv(path, rows):
    rows = {k: (summary_row(v) if isinstance(v, iqa.IQAReport) else v) for k, v in rows.items()}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "ssim_mean", "ssim_std", "psnr_mean", "psnr_std"])
        for name, vals in rows.items():
            w.writerow([name] + [iqa.format_value(v) for v in vals])


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "member", "lr", "train_loss", "val_loss"])
        for it, member, lr, tl, vl in history:
            w.writerow([it, member, repr(float(lr)), repr(float(tl)), repr(float(vl))])
