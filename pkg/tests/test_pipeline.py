import numpy as np
import pytest

from nwsr import experiment, iqa, pipeline, simulate
from nwsr.network import ArchSpec, Network
from nwsr.simulate import NoiseParams


@pytest.fixture(scope="module")
def ds():
    lay = simulate.generate_layout(32, 2.5, 1)
    src = simulate.to_grayscale(simulate.synthetic_source(96, 4))
    return pipeline.simulate_dataset([src], lay, NoiseParams(0.05, 0.02, 3))


def test_dataset_shapes(ds):
    box = ds.layout.box_size
    assert ds.shape == (box, box)
    assert len(ds.frames) == len(simulate.frame_origins(96, box)) ** 2
    fov = ds.fov()
    for f in ds.frames:
        assert np.all(f.hr[fov == 0] == 0)
        assert f.sparse.M.sum() == len(ds.layout)


def test_write_read_round_trip(ds, tmp_path):
    pipeline.write_dataset(ds, tmp_path)
    back = pipeline.read_dataset(tmp_path)
    assert len(back.frames) == len(ds.frames)
    assert np.array_equal(back.layout.centres, ds.layout.centres)
    for a, b in zip(ds.frames, back.frames):
        assert np.max(np.abs(a.hr - b.hr)) < 1e-4
        assert np.array_equal(a.sparse.M, b.sparse.M)
        # PNGs are clipped to [0, 1] and 16-bit quantised
        assert np.max(np.abs(np.clip(a.sparse.S, 0, 1) - b.sparse.S)) < 1e-4
    sig = pipeline.read_signals_csv(tmp_path / "signals_0000.csv")
    px = ds.layout.pixels
    assert np.array_equal(sig, ds.frames[0].sparse.S[px[:, 1], px[:, 0]])


def test_signals_csv_errors(tmp_path):
    (tmp_path / "a.csv").write_text("value\n1\n")
    with pytest.raises(ValueError):
        pipeline.read_signals_csv(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("signal\nx\n")
    with pytest.raises(ValueError):
        pipeline.read_signals_csv(tmp_path / "b.csv")


def test_model_inputs(ds):
    nf = pipeline.normalized(ds)[0]
    assert pipeline.model_input(nf, "cart")[1] is None
    x, m = pipeline.model_input(nf, "nw")
    assert np.all(x[m == 0] == 0)
    with pytest.raises(ValueError):
        pipeline.model_input(nf, "bicubic")
    assert pipeline.arch_for("nw") == "nwnet_sr" and pipeline.arch_for("sparse") == "cnnnet_sr"


@pytest.mark.parametrize("mode", ["cart", "sparse", "nw"])
def test_patches_and_prediction(ds, mode):
    ps = pipeline.patches_for(ds, mode)
    assert len(ps) > 0 and ps.inputs.shape[1:] == (1, 64, 64)
    assert (ps.masks is not None) == (mode == "nw")
    net = Network(ArchSpec(pipeline.arch_for(mode), 1, 2, 2))
    out = pipeline.predict_dataset(net, ds, mode)
    assert len(out) == len(ds.frames) and out[0].shape == ds.shape
    assert np.all(out[0][ds.fov() == 0] == 0)


def test_baselines_in_fov(ds):
    outs = experiment.baseline_outputs(ds)
    for name in experiment.BASELINES:
        assert len(outs[name]) == len(ds.frames)
        assert np.all(outs[name][0][ds.fov() == 0] == 0)
    with pytest.raises(ValueError):
        pipeline.reconstruct_dataset(ds, "bicubic")


def test_evaluation_domains(ds):
    hr = [f.hr for f in ds.frames]
    pred, ref = pipeline.evaluation_pairs(ds, hr, "raw")
    assert pred[0] is hr[0]
    pred, ref = pipeline.evaluation_pairs(ds, hr)
    # perfect output scores perfectly in either domain
    assert all(np.array_equal(p, r) for p, r in zip(pred, ref))
    assert experiment.score(ds, hr).ssim_mean == 1.0


def test_mean_spacing_matches_generator():
    lay = simulate.generate_layout(60, 2.5, 7)
    assert pipeline.mean_spacing(lay) == pytest.approx(2.5, rel=0.1)


def test_table_formats(tmp_path):
    rep = iqa.evaluate_frames([np.full((16, 16), 0.5)], [np.zeros((16, 16))])
    rows = {"INTER": rep, "NW": (0.9, 0.01, 30.0, 1.0)}
    text = experiment.format_table(rows)
    assert text.splitlines()[0].startswith("Method")
    assert "30.00 ±  1.00" in text
    experiment.write_table_csv(tmp_path / "t.csv", rows)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "method,ssim_mean,ssim_std,psnr_mean,psnr_std"
    assert lines[2].startswith("NW,0.9")


def test_history_csv(tmp_path):
    experiment.write_history_csv(tmp_path / "h.csv", [(0, 1, 1e-3, 0.5, 0.25)])
    assert (tmp_path / "h.csv").read_text() == "iteration,member,lr,train_loss,val_loss\n0,1,0.001,0.5,0.25\n"


def test_desk_config_splits_disjoint():
    cfg = experiment.DeskConfig()
    splits = [set(cfg.seeds(s)) for s in ("train", "val", "test")]
    assert [len(s) for s in splits] == [24, 4, 10]
    assert not (splits[0] & splits[1] or splits[0] & splits[2] or splits[1] & splits[2])
    run = cfg.run.pbt()
    assert (run.population, run.iterations, run.perturbation_interval) == (6, 20, 5)
