"""Acceptance criteria 1-8, each at its stated tolerance.

Every test carries a ``criterion`` marker; conftest prints one PASS/FAIL
line per criterion at the end of the session. Criterion 5 trains three
desk-scale models and takes well over an hour on one core.
"""

import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.signal import correlate2d
from scipy.spatial import Delaunay

from nwsr import baseline, cli, experiment, gradcheck, iqa, nwlayer, simulate
from nwsr.imaging import FiberLayout, sparsify
from nwsr.network import ArchSpec
from nwsr.simulate import NoiseParams
from nwsr.train import PBTConfig, extract_patches, pbt_run

# --- 1. NW layer correctness ----------------------------------------------


@pytest.mark.criterion(1, "NW layer hand case and dense-mask convolution")
def test_c1_nw_layer():
    t0 = time.perf_counter()
    S = np.zeros((3, 3))
    S[1, 1], S[1, 2] = 2.0, 6.0
    R, Mup = nwlayer.nw_forward_2d(S, (S != 0).astype(float), np.full((3, 3), 1 / 9), 0.0, eps=0.0)
    assert abs(R[1, 1] - 4.0) < 1e-12
    assert abs(Mup[1, 1] - 2 / 9) < 1e-12
    rng = np.random.default_rng(2024)
    for _ in range(100):
        k = int(rng.choice([1, 3, 5]))
        W = nwlayer.normalize_kernel(rng.random((1, 1, k, k)) + 1e-3)[0, 0]
        b = rng.normal()
        S = rng.normal(size=(12, 12))
        R, Mup = nwlayer.nw_forward_2d(S, np.ones_like(S), W, b, eps=0.0)
        ref = correlate2d(S, W, mode="same") + b
        p = k // 2
        inner = (slice(p, 12 - p), slice(p, 12 - p))
        assert np.max(np.abs(R - ref)[inner]) < 1e-12
        assert np.max(np.abs(Mup[inner] - 1.0)) < 1e-12
    assert time.perf_counter() - t0 < 1.0


# --- 2. gradient fidelity -------------------------------------------------


@pytest.mark.criterion(2, "gradients match central differences")
def test_c2_gradients():
    t0 = time.perf_counter()
    for c_in, t, k in [(1, 1, 1), (1, 3, 4), (4, 1, 1), (4, 3, 4)]:
        assert gradcheck.check_nw(c_in, t, k, seed=c_in + t + k) < 1e-4
        assert gradcheck.check_conv(c_in, t, k, seed=c_in + t + k) < 1e-4
    assert gradcheck.check_loss(seed=1) < 1e-4
    for arch in ("cnnnet_sr", "nwnet_sr"):
        assert gradcheck.check_network(arch, blocks=4, filters=16, seed=5, n=200) < 1e-3
    assert time.perf_counter() - t0 < 120


# --- 3. baseline oracles --------------------------------------------------


@pytest.mark.criterion(3, "Delaunay affine exactness, Voronoi brute force, frozen Gaussian NW")
def test_c3_baselines():
    t0 = time.perf_counter()
    lay = simulate.generate_layout(20, 2.5, 4)
    tri = baseline.delaunay_triangulate(lay)
    box = lay.box_size
    x, y = lay.centres.T
    out = baseline.interpolate_linear(0.7 * x - 0.4 * y + 1.3, tri, box, box)
    v, u = np.mgrid[0:box, 0:box]
    inside = Delaunay(lay.centres).find_simplex(np.c_[u.ravel(), v.ravel()], tol=-1e-9).reshape(box, box) >= 0
    assert inside.sum() > 0.5 * box * box
    assert np.max(np.abs(out - (0.7 * u - 0.4 * v + 1.3))[inside]) < 1e-9

    vl = simulate.generate_layout(32, 4.0, 9)
    labels = simulate.voronoi_labels(vl, 64, 64)
    cx, cy = vl.fov_centre
    for vv in range(64):
        for uu in range(64):
            if (uu - cx) ** 2 + (vv - cy) ** 2 > vl.fov_radius**2:
                assert labels[vv, uu] == -1
                continue
            d = (vl.centres[:, 0] - uu) ** 2 + (vl.centres[:, 1] - vv) ** 2
            assert labels[vv, uu] == int(np.argmin(d))
    hr = np.random.default_rng(0).random((64, 64))
    sig = simulate.voronoi_downsample(hr, vl, labels)
    for f in range(len(vl)):
        assert abs(sig[f] - hr[labels == f].mean()) < 1e-14  # summation order differs

    # pixel-aligned protocol: integer centres, one frozen Gaussian layer
    rng = np.random.default_rng(3)
    pts = set()
    while len(pts) < 60:
        pts.add(tuple(rng.integers(3, 37, size=2).astype(float)))
    gl = FiberLayout(np.array(sorted(pts)), (20.0, 20.0), 23.0)
    s = rng.random(len(gl))
    sp = sparsify(s, gl, 40, 40)
    with np.errstate(invalid="ignore"):
        R, Mup = nwlayer.nw_forward_2d(sp.S, sp.M, nwlayer.gaussian_kernel(1.3), 0.0, eps=0.0)
    ref = baseline.nw_gaussian_reconstruct(s, gl, 1.3, 40, 40)
    ok = Mup > 0
    assert np.max(np.abs(R[ok] - ref[ok])) < 1e-6
    assert time.perf_counter() - t0 < 60


# --- 4. metric validity ---------------------------------------------------


def _direct_ssim(x, y):
    g = iqa.gaussian_window()
    w = np.outer(g, g)
    C1, C2 = 0.01**2, 0.03**2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            a, b = x[i : i + 11, j : j + 11], y[i : i + 11, j : j + 11]
            ma, mb = (w * a).sum(), (w * b).sum()
            va, vb = (w * (a - ma) ** 2).sum(), (w * (b - mb) ** 2).sum()
            cab = (w * (a - ma) * (b - mb)).sum()
            vals.append((2 * ma * mb + C1) * (2 * cab + C2) / ((ma**2 + mb**2 + C1) * (va + vb + C2)))
    return float(np.mean(vals))


@pytest.mark.criterion(4, "PSNR closed form, SSIM dual implementation, SSIM(x, x) = 1")
def test_c4_metrics():
    assert abs(iqa.psnr(np.full((8, 8), 0.5), np.zeros((8, 8))) - 6.0206) < 1e-6
    assert abs(iqa.psnr(np.full((8, 8), 0.5), np.zeros((8, 8))) - 20 * math.log10(2)) < 1e-12
    rng = np.random.default_rng(8)
    for _ in range(3):
        a = rng.random((24, 24))
        b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
        assert abs(iqa.ssim(a, b) - _direct_ssim(a, b)) < 1e-9
        assert iqa.ssim(a, a) == 1.0


# --- 5. desk-scale ordering -----------------------------------------------


@pytest.mark.criterion(5, "desk-scale ordering: models beat INTER by >= 0.5 dB, INTER SSIM > NW GAUSS")
def test_c5_desk_ordering(tmp_path, acceptance_note):
    t0 = time.perf_counter()
    reports, _ = experiment.desk_compare(experiment.DeskConfig())
    experiment.write_table_csv(tmp_path / "desk.csv", reports)
    acceptance_note(f"desk-scale comparison ({time.perf_counter() - t0:.0f} s):")
    for line in experiment.format_table(reports).splitlines():
        acceptance_note("  " + line)
    inter = reports["INTER"]
    assert inter.ssim_mean > reports["NW GAUSS"].ssim_mean
    for name in experiment.MODELS:
        assert reports[name].psnr_mean >= inter.psnr_mean + 0.5, name
        assert reports[name].ssim_mean > inter.ssim_mean, name


# --- 6. PBT mechanics -----------------------------------------------------


@pytest.mark.criterion(6, "PBT exploit copies bitwise, population minimum never rises, full history")
def test_c6_pbt():
    rng = np.random.default_rng(0)

    def patches(n):
        y = rng.random((n, 1, 64, 64))
        return extract_patches(list(y[:, 0] + 0.1 * rng.normal(size=(n, 64, 64))), list(y[:, 0]))

    train, val = patches(6), patches(3)
    cfg = PBTConfig(population=6, iterations=10, perturbation_interval=5, lr_grid=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7), batch_size=3, seed=7)
    before, after = {}, {}

    def snap(store):
        def cb(it, members):
            store[it] = {m.id: (m.net.get_flat().copy(), m.val_loss) for m in members}

        return cb

    res = pbt_run(cfg, train, val, ArchSpec("cnnnet_sr", 1, 4), callback=snap(before), after_exploit=snap(after))
    for m in range(6):
        assert [h[0] for h in res.history if h[1] == m] == list(range(10))
    # exploit at the interval boundary only, never after the final iteration
    assert sorted(after) == [4]
    assert len(res.events) == 3
    b, a = before[4], after[4]
    targets = {e.target for e in res.events}
    for e in res.events:
        assert np.array_equal(a[e.target][0], b[e.source][0])
        assert a[e.target][0].tobytes() == b[e.source][0].tobytes()
    for m in set(range(6)) - targets:
        assert a[m][0].tobytes() == b[m][0].tobytes()
    assert min(v for _, v in a.values()) <= min(v for _, v in b.values())


# --- 7. simulation determinism --------------------------------------------


@pytest.mark.criterion(7, "byte-identical simulation and noise CLT bounds")
def test_c7_simulation(tmp_path):
    src = tmp_path / "src"
    assert cli.main(["make-sources", "--count", "2", "--size", "256", "--seed", "1", "--out-dir", str(src)]) == 0
    inputs = [str(p) for p in sorted(src.glob("*.png"))]
    for run in ("a", "b"):
        assert cli.main(["simulate", "--input", *inputs, "--layout", "gen:60,2.5,7", "--seed", "3", "--out-dir", str(tmp_path / run)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "manifest.json")
    assert len(files) > 10
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    out = simulate.add_noise(np.ones(100_000), NoiseParams(0.1, 0.0, 0))
    assert abs(out.mean() - 1.0) < 0.002
    assert abs(out.std() - 0.1) < 0.005


# --- 8. end-to-end reproducibility ----------------------------------------


def _chain(root):
    data, cfg = root / "data", root / "run.cfg"
    steps = [
        ["simulate", "--input", str(root / "source.png"), "--layout", "gen:32,2.5,1", "--seed", "5", "--out-dir", str(data)],
        ["train", "--config", str(cfg), "--mode", "nw", "--out-dir", str(root / "nw")],
        ["train", "--config", str(cfg), "--mode", "cart", "--out-dir", str(root / "cart")],
        ["eval", "--sr-dir", str(root / "nw" / "sr"), "--hr-dir", str(data), "--out", str(root / "nw.csv")],
        ["eval", "--sr-dir", str(root / "cart" / "sr"), "--hr-dir", str(data), "--out", str(root / "cart.csv")],
        ["compare", "--report", f"NW={root / 'nw.csv'}", "--report", f"CART={root / 'cart.csv'}", "--out", str(root / "table.csv")],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv


MANIFESTS = ["data/manifest.json", "nw/manifest.json", "cart/manifest.json", "nw.csv.manifest.json", "cart.csv.manifest.json", "table.csv.manifest.json"]


@pytest.mark.criterion(8, "simulate -> train -> eval -> compare replayed from manifests, CSVs byte-identical")
def test_c8_end_to_end(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["make-sources", "--count", "1", "--size", "72", "--seed", "2", "--out-dir", str(tmp_path / "src")]) == 0
    for root in (a, b):
        root.mkdir()
        shutil.copy(tmp_path / "src" / "source_0000.png", root / "source.png")
        (root / "run.cfg").write_text(
            "train_dir = data\nval_dir = data\ntest_dir = data\n"
            "blocks = 1\nfilters = 4\nnw_depth = 2\npopulation = 2\niterations = 4\nperturbation_interval = 2\n"
            "batch_size = 2\nlr_grid = 1e-3, 1e-4\nseed = 9\n"
        )
    _chain(a)
    # replay every step from the argv its manifest recorded, redirected to b
    for rel in MANIFEST_ORDER:
        doc = json.loads((a / rel).read_text())
        assert doc["tool"] == "nwsr" and doc["version"] == cli.VERSION
        argv = [arg.replace(str(a), str(b)) for arg in doc["argv"]]
        assert cli.main(argv) == 0, argv
    csvs = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    assert len(csvs) >= 8
    for rel in csvs:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


MANIFEST_ORDER = MANIFESTS
