import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mspg.harness import checkpoint as ckpt
from mspg.harness.config import ConfigError, RunConfig, load, parse, serialize
from mspg.harness.data import (IngestError, RingDataset, ShapesDataset, ingest_images, mode_coverage,
                               read_pgm, write_pgm)
from mspg.harness.runner import (METRICS_COLUMNS, Run, first_divergence, finite_rows, read_csv,
                                 replay_schedule, write_csv)

CHI2_7 = 24.322     # p = 0.001, 7 degrees of freedom


def _tiny(**kw):
    base = dict(rounds=12, eval_every=4, eval_samples=32, dqn_warmup=4, dqn_batch=4)
    base.update(kw)
    return RunConfig(**base)


# -- config ----------------------------------------------------------------------------
def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse("rounds = 10\nlearning_rate = 0.1\n")


@pytest.mark.parametrize("text", ["rounds = 0", "eta_g = 2.0", "windows = 1,2,4,8", "fusion = concat",
                                  "balance_lr_min = 0.1\nbalance_lr_max = 0.01", "rounds", "eta_d = nan",
                                  "apfl = maybe", "dataset = mnist"])
def test_bad_values_rejected(text):
    with pytest.raises(ConfigError):
        parse(text)


def test_comments_and_blank_lines():
    cfg = parse("# header\n\nrounds = 7   # trailing\n")
    assert cfg.rounds == 7


@settings(max_examples=50, deadline=None)
@given(rounds=st.integers(1, 10 ** 6), seed=st.integers(0, 2 ** 64 - 1),
       eta=st.floats(1e-6, 1.0, allow_nan=False), ema=st.floats(0.0, 1.0, allow_nan=False),
       apfl=st.booleans(), fusion=st.sampled_from(["additive", "weighted"]))
def test_config_round_trip(rounds, seed, eta, ema, apfl, fusion):
    cfg = RunConfig(rounds=rounds, seed=seed, eta_g=eta, ema_decay=ema, apfl=apfl, fusion=fusion)
    assert parse(serialize(cfg)) == cfg


def test_packaged_ring_config_loads():
    import importlib.resources as ir
    cfg = load(str(ir.files("mspg") / "configs" / "ring.cfg"))
    assert cfg.dataset == "ring" and cfg.rounds == 2000 and cfg.windows == (1, 2, 4)


# -- ring -------------------------------------------------------------------------------
def test_ring_zero_noise_hits_centers_exactly():
    ring = RingDataset(std=0.0)
    pts, modes = ring.sample(500, np.random.default_rng(0), return_modes=True)
    np.testing.assert_array_equal(pts, ring.centers()[modes])
    assert np.allclose(np.linalg.norm(ring.centers(), axis=1), 2.0)


def test_ring_mode_frequencies_uniform():
    _, modes = RingDataset().sample(16000, np.random.default_rng(5), return_modes=True)
    counts = np.bincount(modes, minlength=8)
    exp = counts.sum() / 8
    assert ((counts - exp) ** 2 / exp).sum() < CHI2_7


def test_ring_seeded_generation_reproducible():
    from mspg.harness.data import generate_ring
    a = generate_ring(100, RingDataset(), 3)
    np.testing.assert_array_equal(a, generate_ring(100, RingDataset(), 3))


def _coverage_oracle(samples, ring):
    """Loop-based restatement of the coverage and high-quality definitions."""
    c = ring.centers()
    n = len(samples)
    counts = [0] * ring.modes
    good = 0
    for p in samples:
        dists = [float(np.hypot(p[0] - cx, p[1] - cy)) for cx, cy in c]
        k = min(range(ring.modes), key=lambda j: dists[j])
        if dists[k] <= ring.hq_radius:
            good += 1
            counts[k] += 1
    need = max(1, n / (10 * ring.modes))
    return sum(1 for x in counts if x >= need), good / n


@pytest.mark.parametrize("seed", range(5))
def test_coverage_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    ring = RingDataset()
    real = ring.sample(200, r)
    samples = np.concatenate([real[r.random(200) < r.random()], r.uniform(-3, 3, size=(100, 2))])
    cov, frac = mode_coverage(samples, ring)
    cov_o, frac_o = _coverage_oracle(samples, ring)
    assert cov == cov_o and abs(frac - frac_o) < 1e-12


def test_coverage_extremes():
    ring = RingDataset()
    assert mode_coverage(ring.sample(800, np.random.default_rng(0)), ring) == (8, 1.0)
    assert mode_coverage(np.zeros((100, 2)), ring) == (0, 0.0)
    # one mode only
    assert mode_coverage(np.tile(ring.centers()[:1], (50, 1)), ring) == (1, 1.0)
    # the high-quality radius is below half the inter-center gap, so nearest-center assignment is unambiguous
    gap = np.linalg.norm(ring.centers()[0] - ring.centers()[1])
    assert ring.hq_radius < gap / 2


# -- shapes ---------------------------------------------------------------------------------
def test_shapes_in_range_and_recognised():
    ds = ShapesDataset()
    x = ds.sample(90, np.random.default_rng(0))
    assert x.shape == (90, 1, 16, 16) and x.min() >= -1 and x.max() <= 1
    q, covered = ds.quality(x)
    assert covered == 3 and q > 0.4
    assert ds.quality(np.random.default_rng(1).uniform(-1, 1, size=(90, 1, 16, 16))) == (0.0, 0)
    assert ds.quality(-np.ones((90, 1, 16, 16))) == (0.0, 0)


# -- PGM ingestion --------------------------------------------------------------------------
def test_pgm_white_image_reads_one(tmp_path):
    p = tmp_path / "w.pgm"
    p.write_bytes(b"P5\n# comment\n20 18\n255\n" + bytes([255]) * 360)
    img = read_pgm(str(p))
    assert img.shape == (18, 20) and np.all(img == 1.0)


def test_pgm_sixteen_bit(tmp_path):
    p = tmp_path / "d.pgm"
    p.write_bytes(b"P5 2 1 1000 " + np.array([0, 1000], dtype=">u2").tobytes())
    np.testing.assert_array_equal(read_pgm(str(p)), [[0.0, 1.0]])


@pytest.mark.parametrize("blob", [b"P2\n4 4\n255\n" + b"0" * 16, b"P5\n4 4\n255\n" + b"\0" * 5, b"P5\n4",
                                  b"P5\nx 4\n255\n" + b"\0" * 16, b""])
def test_corrupt_pgm_rejected(tmp_path, blob):
    p = tmp_path / "bad.pgm"
    p.write_bytes(blob)
    with pytest.raises(IngestError):
        read_pgm(str(p))


def test_mixed_directory(tmp_path):
    r = np.random.default_rng(0)
    for i in range(3):
        write_pgm(str(tmp_path / f"ok{i}.pgm"), r.random((20, 20)))
    write_pgm(str(tmp_path / "small.pgm"), r.random((8, 8)))
    (tmp_path / "junk.pgm").write_bytes(b"not an image")
    (tmp_path / "sub").mkdir()
    folder = ingest_images(str(tmp_path))
    assert folder.images.shape == (3, 1, 16, 16) and folder.skipped == 2
    assert folder.files == ["ok0.pgm", "ok1.pgm", "ok2.pgm"]
    assert folder.images.min() >= -1 and folder.images.max() <= 1


def test_empty_or_all_bad_directory(tmp_path):
    with pytest.raises(IngestError):
        ingest_images(str(tmp_path))
    (tmp_path / "a.pgm").write_bytes(b"nope")
    with pytest.raises(IngestError):
        ingest_images(str(tmp_path))
    with pytest.raises(IngestError):
        ingest_images(str(tmp_path / "missing"))


def test_directory_dataset_trains(tmp_path):
    r = np.random.default_rng(0)
    for i in range(4):
        write_pgm(str(tmp_path / f"{i}.pgm"), r.random((16, 16)))
    run = Run(_tiny(dataset=f"dir:{tmp_path}", rounds=3, eval_every=3, eval_samples=8))
    rows = run.run()
    assert len(rows) == 3 and finite_rows(rows)


# -- checkpoints ----------------------------------------------------------------------------
def test_checkpoint_save_load_save_identical(tmp_path):
    run = Run(_tiny())
    run.run(stop_after=6)
    p1, p2 = tmp_path / "a.mspc", tmp_path / "b.mspc"
    run.save_checkpoint(str(p1))
    Run.from_checkpoint(str(p1)).save_checkpoint(str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_codec_round_trip():
    arrays = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], dtype=np.float64)}
    header, back = ckpt.decode(ckpt.encode({"x": [1, 2]}, arrays))
    assert header == {"x": [1, 2]}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)


@pytest.mark.parametrize("cut", [0, 3, 7, 20, -3])
def test_truncated_checkpoint_rejected(cut):
    blob = ckpt.encode({"a": 1}, {"w": np.ones((4, 4), dtype=np.float32)})
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(blob[:cut])


def test_checkpoint_trailing_bytes_and_version():
    blob = ckpt.encode({}, {})
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(blob + b"x")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(blob[:4] + b"\x09" + blob[5:])


# -- CSV outputs and replay -------------------------------------------------------------------
def test_metrics_schema_and_finite(tmp_path):
    run = Run(_tiny())
    rows = run.run()
    path = tmp_path / "m.csv"
    write_csv(str(path), METRICS_COLUMNS, rows)
    back = read_csv(str(path))
    assert list(back[0]) == METRICS_COLUMNS
    assert [int(r["round"]) for r in back] == list(range(1, 13))
    assert finite_rows(back)
    assert {r["stage"] for r in back} <= {"early", "middle", "late"}


def test_replay_reproduces_schedule():
    cfg = _tiny(seed=11)
    run = Run(cfg)
    run.run()
    assert first_divergence(run.schedule_rows, replay_schedule(cfg)) is None
    other = replay_schedule(cfg.with_overrides(seed=12))
    assert first_divergence(run.schedule_rows, other) is not None


def test_first_divergence_reports_round():
    rows = [{"round": str(i), "eta_G": "0.1", "eta_D": "0.1", "lambda_aux": "0.1", "balance_action": "0"}
            for i in range(1, 6)]
    changed = [dict(r) for r in rows]
    changed[3]["eta_D"] = "0.05"
    assert first_divergence(rows, changed) == 4
    assert first_divergence(rows, rows[:3]) == 4
    assert first_divergence(rows, rows) is None


def test_shapes_run_outputs_images():
    run = Run(_tiny(dataset="shapes", rounds=2, eval_every=2, eval_samples=8))
    run.run()
    x = run.generate(n=4)
    assert x.shape == (4, 1, 16, 16) and np.all(np.abs(x) <= 1)


def test_final_evaluation_keys():
    run = Run(_tiny(rounds=4))
    run.run()
    res = run.final_evaluation(n=64)
    assert set(res) == {"coverage", "hq_fraction", "quality"}
    assert 0 <= res["hq_fraction"] <= 1 and 0 <= res["coverage"] <= 8
