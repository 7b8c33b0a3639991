"""End-to-end acceptance checks, one test per criterion.

Each test stores a short summary in ``user_properties``; ``conftest.py`` prints
one PASS/FAIL line per criterion at the end of the run.
"""

import math
import time
import zlib

import numpy as np
import pytest

from test_ndgrad import OPS
from test_pooling import _brute_social, _brute_truncate
from test_scene import _pixel_scene, _recount
from trajcast import ndgrad as nd
from trajcast.cli import main
from trajcast.params import zeros_like
from trajcast.pooling import PoolConfig, social_tensor, truncate_neighbors
from trajcast.scene import GridSpec, build_ground_truth_map, subsample
from trajcast.seq2seq import GaussianParams, ModelConfig, collate, extract_windows, init_params, model_loss, nll, sample
from trajcast.sscn import SSCNConfig, build_dataset, build_map, cross_entropy, init_weights, sscn_forward, sscn_loss, train_sscn
from trajcast.synth import SynthSpec, generate_synth, obstacle_rects, ring_road_scene
from trajcast.training import evaluate, train_model

pytestmark = pytest.mark.slow


def _detail(request, text):
    request.node.user_properties.append(("detail", text))


# -- 1: gradients ------------------------------------------------------------


def _worst(fn, inputs):
    return max(nd.gradcheck(fn, inputs).values())


def _op_errors():
    errs = {}
    for name, (fn, shapes) in OPS.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        errs[name] = _worst(fn, [nd.parameter(rng.uniform(-1, 1, size=s)) for s in shapes])
    rng = np.random.default_rng(0)
    p = lambda *s, lo=-1.0, hi=1.0: nd.parameter(rng.uniform(lo, hi, size=s))
    errs["div"] = _worst(nd.div, [p(3, 4), p(3, 4, lo=0.5, hi=2.0)])
    errs["log"] = _worst(nd.log, [p(3, 4, lo=0.3, hi=3.0)])
    away = rng.uniform(0.1, 1.0, size=(4, 5)) * rng.choice([-1.0, 1.0], size=(4, 5))
    errs["relu"] = _worst(nd.relu, [nd.parameter(away)])
    errs["clip"] = _worst(lambda t: nd.clip(t, -0.6, 0.6), [nd.parameter(away * 0.5 + np.sign(away) * 0.2)])
    errs["embedding"] = _worst(lambda t: nd.embedding(t, np.array([3, 0, 3])), [p(4, 2)])
    for stride in (1, 2):
        errs[f"conv2d/{stride}"] = _worst(lambda x, w, b: nd.conv2d(x, w, b, stride=stride), [p(1, 2, 6, 6), p(3, 2, 3, 3), p(3)])
    errs["maxpool2d"] = _worst(lambda t: nd.maxpool2d(t, 2), [nd.parameter(rng.permutation(72).reshape(1, 2, 6, 6) / 30.0)])
    errs["local_response_norm"] = _worst(nd.local_response_norm, [p(1, 6, 2, 2, lo=-30.0, hi=30.0)])
    return errs


def _sscn_error():
    cfg = SSCNConfig(num_classes=2, patch_size=10, context_size=12, filters=(2, 3), class_embed=3,
                     stream_width=4, merged=(5, 3))
    w = init_weights(cfg, 5)
    rng = np.random.default_rng(8)
    from trajcast.sscn import SSCNDataset

    ds = SSCNDataset(classes=rng.integers(0, 2, size=3), patches=rng.uniform(size=(3, 10, 10, 3)),
                     contexts=rng.uniform(size=(2, 12, 12, 3)), context_index=rng.integers(0, 2, size=3),
                     targets=rng.uniform(size=3))
    names = sorted(w)
    return _worst(lambda *t: sscn_loss(ds, dict(zip(names, t)), cfg), [w[k] for k in names])


def _model_error(mode):
    pool = PoolConfig(neighborhood=0.4, social_grid=2, reach_size=60, reach_cell=20)
    cfg = ModelConfig(hidden=8, window=2, pos_embed=4, social_embed=4, reach_embed=3, attn_dim=4,
                      obs_len=3, pred_len=2, mode=mode, pool=pool)
    scene = subsample(generate_synth(SynthSpec(kind="obstacle-field", n_trajectories=3, length=cfg.span, seed=2)), 10)
    maps = {0: build_ground_truth_map(scene, 0, GridSpec(20))} if mode == "sd-att" else None
    batch = collate(extract_windows(scene, cfg, maps)[:1], cfg)
    params = init_params(cfg, 7)
    names = sorted(params)
    return _worst(lambda *t: model_loss(dict(zip(names, t)), batch, cfg), [params[k] for k in names])


@pytest.mark.criterion(1)
def test_criterion_1_gradient_suite(request):
    start = time.perf_counter()
    ops = _op_errors()
    sscn_err = _sscn_error()
    model = {mode: _model_error(mode) for mode in ("d-att", "sd-att")}
    elapsed = time.perf_counter() - start
    _detail(request, f"ops max {max(ops.values()):.1e}, sscn {sscn_err:.1e}, "
                     f"d-att {model['d-att']:.1e}, sd-att {model['sd-att']:.1e}, {elapsed:.0f}s")
    assert max(ops.values()) < 1e-4, {k: v for k, v in ops.items() if v >= 1e-4}
    assert sscn_err < 1e-4
    assert max(model.values()) < 1e-3, model
    assert elapsed < 60.0


# -- 2: analytic values ------------------------------------------------------


@pytest.mark.criterion(2)
def test_criterion_2_analytic_values(request):
    theta = GaussianParams(np.array([0.2, -0.7]), np.array([1.0, 1.0]), np.array(0.0))
    nll_err = abs(nll(theta, [0.2, -0.7]) - math.log(2 * math.pi))
    ce_err = abs(cross_entropy(nd.constant(np.array([[0.5]])), [0.5]).item() - math.log(2.0))
    cfg = SSCNConfig(patch_size=16, context_size=16, filters=(2,), stream_width=4, merged=(4,))
    w = zeros_like(init_weights(cfg, 0))
    rng = np.random.default_rng(0)
    out = sscn_forward([0, 0], rng.uniform(size=(2, 16, 16, 3)), rng.uniform(size=(1, 16, 16, 3)), w, cfg, [0, 0]).data
    _detail(request, f"|nll - log 2pi| {nll_err:.1e}, |ce - log 2| {ce_err:.1e}, zero-weight output {out.ravel().tolist()}")
    assert nll_err < 1e-9
    assert ce_err < 1e-9
    assert np.all(out == 0.5)


# -- 3: pooling oracle -------------------------------------------------------


@pytest.mark.criterion(3)
def test_criterion_3_pooling_oracle(request):
    rng = np.random.default_rng(31)
    mismatches = 0
    for _ in range(1000):
        g = int(rng.integers(1, 7))
        ds = float(rng.uniform(0.05, 0.5))
        d_h, n_cls = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        cfg = PoolConfig(neighborhood=ds, social_grid=g, hidden=d_h, num_classes=n_cls)
        target = rng.uniform(size=2)
        n = int(rng.integers(0, 51))
        nb = [(int(rng.integers(n_cls)), target + rng.uniform(-ds, ds, size=2), rng.normal(size=d_h)) for _ in range(n)]
        mismatches += not np.array_equal(social_tensor(target, nb, cfg), _brute_social(target, nb, ds, g, d_h, n_cls))
        subjects = [(int(s), rng.integers(0, 6, size=2) / 5.0) for s in rng.permutation(100)[:n]]
        max_n = int(rng.integers(1, 45))
        got = [s for s, _ in truncate_neighbors(subjects, target, max_n)]
        mismatches += got != [s for s, _ in _brute_truncate(subjects, target, max_n)]
    _detail(request, f"{mismatches} mismatches over 1000 instances")
    assert mismatches == 0


# -- 4: ground-truth maps ----------------------------------------------------


@pytest.mark.criterion(4)
def test_criterion_4_ground_truth_map_oracle(request):
    rng = np.random.default_rng(44)
    mismatches, checked = 0, 0
    for _ in range(200):
        cell = int(rng.integers(2, 6))
        h, w = int(rng.integers(cell, 8 * cell + 1)), int(rng.integers(cell, 8 * cell + 1))
        n = int(rng.integers(1, 11))
        paths = [rng.uniform(0, 1, size=(int(rng.integers(1, 6)), 2)) * [w, h] for _ in range(n)]
        classes = [int(rng.integers(0, 2)) for _ in range(n)]
        scene = _pixel_scene(paths, h, w, classes)
        for k in set(classes):
            grid = build_ground_truth_map(scene, k, GridSpec(cell)).grid
            checked += 1
            mismatches += not np.array_equal(grid, _recount(scene, k, cell, h, w))
            mismatches += not (grid.min() >= 0 and grid.max() <= 1)
    _detail(request, f"{mismatches} mismatches over {checked} maps")
    assert mismatches == 0


# -- 5: sampling -------------------------------------------------------------


@pytest.mark.criterion(5)
def test_criterion_5_sampling(request):
    start = time.perf_counter()
    n = 100_000
    mu = np.array([0.3, 0.6])
    theta = GaussianParams(np.tile(mu, (n, 1)), np.tile([0.5, 1.5], (n, 1)), np.full(n, 0.8))
    draws = sample(theta, np.random.default_rng(5))
    elapsed = time.perf_counter() - start
    corr = np.corrcoef(draws.T)[0, 1]
    shift = np.abs(draws.mean(axis=0) - mu).max()
    _detail(request, f"corr {corr:.4f}, mean offset {shift:.4f}, {elapsed:.2f}s")
    assert 0.77 <= corr <= 0.83
    assert shift < 0.02
    assert elapsed < 5.0


# -- 6: learnability ---------------------------------------------------------


@pytest.mark.criterion(6)
def test_criterion_6_constant_velocity_learnability(request):
    cfg = ModelConfig(hidden=32, window=5, obs_len=8, pred_len=12, mode="d-att")
    rows = []
    for seed in range(3):
        train = subsample(generate_synth(SynthSpec(n_trajectories=300, noise=0.01, seed=seed)), 10)
        test = subsample(generate_synth(SynthSpec(n_trajectories=100, noise=0.01, seed=seed + 100)), 10)
        untrained, _ = evaluate(init_params(cfg, seed), [test], cfg, seed=seed)
        start = time.perf_counter()
        params, hist = train_model([train], cfg, lr=0.003, optimizer="rmsprop", epochs=20, seed=seed)
        elapsed = time.perf_counter() - start
        trained, _ = evaluate(params, [test], cfg, seed=seed)
        rows.append((trained.ade / untrained.ade, hist.epoch_nll[0], hist.epoch_nll[-1], elapsed))
    _detail(request, "; ".join(f"ratio {r:.3f} nll {a:.1f}->{b:.1f} {t:.0f}s" for r, a, b, t in rows))
    for ratio, first, last, elapsed in rows:
        assert elapsed < 300.0
        assert ratio < 0.2
        assert last < first - 1.0


# -- 7: SSCN fixture ---------------------------------------------------------


@pytest.mark.criterion(7)
def test_criterion_7_sscn_fixture(request):
    grid = GridSpec(20)
    cfg = SSCNConfig()
    scenes = [ring_road_scene(s) for s in (0, 1)]
    start = time.perf_counter()
    weights, hist = train_sscn(build_dataset(scenes, grid, cfg), cfg, lr=0.05, epochs=50, seed=0)
    corr = [
        np.corrcoef(build_map(s, 0, weights, grid, cfg).grid.ravel(), build_ground_truth_map(s, 0, grid).grid.ravel())[0, 1]
        for s in scenes
    ]
    elapsed = time.perf_counter() - start
    _detail(request, f"H {hist.epoch_loss[-1]:.4f}, corr {min(corr):.4f}, {elapsed:.0f}s")
    assert hist.epoch_loss[-1] < 0.3
    assert min(corr) > 0.8
    assert elapsed < 300.0


# -- 8: static context -------------------------------------------------------


def _obstacle_scene(seed, n):
    return subsample(generate_synth(SynthSpec(kind="obstacle-field", seed=seed, n_trajectories=n)), 10)


def _hit_rate(preds, scene):
    rects = obstacle_rects(scene)
    pts = np.concatenate([p.points for p in preds]).reshape(-1, 2) * [scene.width, scene.height]
    return float(np.mean([any(r.contains(x, y) for r in rects) for x, y in pts]))


@pytest.mark.criterion(8)
def test_criterion_8_static_context_benefit(request):
    """SD-ATT against D-ATT on held-out obstacle-field scenes.

    The scene network is trained once on six scenes of its own; per seed the
    trajectory models train on five 150-walker scenes and are scored on an
    unseen 300-walker scene, with points sampled from the predicted Gaussians.
    """
    grid = GridSpec(20)
    scfg = SSCNConfig(patch_size=32, context_size=32)
    weights, _ = train_sscn(build_dataset([_obstacle_scene(300 + j, 300) for j in range(6)], grid, scfg),
                            scfg, lr=0.002, epochs=30, seed=0, optimizer="rmsprop")
    results = {"d-att": [], "sd-att": []}
    for seed in range(3):
        train = [_obstacle_scene(100 + 10 * seed + j, 150) for j in range(5)]
        test = _obstacle_scene(200 + seed, 300)
        maps = [{0: build_map(s, 0, weights, grid, scfg)} for s in train]
        test_maps = [{0: build_map(test, 0, weights, grid, scfg)}]
        for mode in results:
            cfg = ModelConfig(mode=mode, pool=PoolConfig(reach_size=100, reach_cell=20))
            use = mode == "sd-att"
            params, _ = train_model(train, cfg, maps if use else None, epochs=20, seed=seed)
            report, preds = evaluate(params, [test], cfg, test_maps if use else None, seed=seed)
            results[mode].append((report.ade, _hit_rate(preds, test)))
    d_ade, d_hit = np.mean(results["d-att"], axis=0)
    s_ade, s_hit = np.mean(results["sd-att"], axis=0)
    _detail(request, f"ADE sd-att {s_ade:.4f} vs d-att {d_ade:.4f}; hit rate sd-att {s_hit:.4f} vs d-att {d_hit:.4f}")
    assert s_ade <= d_ade
    assert s_hit <= d_hit


# -- 9: determinism ----------------------------------------------------------


@pytest.mark.criterion(9)
def test_criterion_9_determinism(request, tmp_path):
    tiny = ["--set", "model.hidden=8", "--set", "model.obs_len=4", "--set", "model.pred_len=3",
            "--set", "model.window=3", "--epochs", "2"]
    sscn = ["--set", "sscn.patch_size=16", "--set", "sscn.context_size=16", "--set", "sscn.filters=[2]",
            "--set", "sscn.stream_width=4", "--set", "sscn.merged=[4]"]
    scene = tmp_path / "scene"
    runs = []
    for _ in range(2):
        assert main(["synth", "--spec", "obstacle-field", "--seed", "3", "--out", str(scene),
                     "--set", "synth.n_trajectories=30", "--set", "synth.length=7"]) == 0
        files = {p.name: p.read_bytes() for p in scene.iterdir()}
        out = tmp_path / "run"
        assert main(["train-sscn", "--seed", "1", "--scenes", str(scene), "--out", str(out / "sscn"), "--epochs", "1", *sscn]) == 0
        assert main(["build-maps", "--scenes", str(scene), "--sscn-checkpoint", str(out / "sscn" / "sscn.ckpt"),
                     "--out", str(out / "maps"), *sscn]) == 0
        assert main(["train", "--seed", "1", "--scenes", str(scene), "--maps", str(out / "maps"),
                     "--out", str(out / "model"), "--mode", "sd-att", *tiny]) == 0
        assert main(["eval", "--seed", "1", "--scenes", str(scene), "--maps", str(out / "maps"),
                     "--checkpoint", str(out / "model" / "model.ckpt"), "--out", str(out / "eval")]) == 0
        for p in sorted(out.rglob("*")):
            if p.is_file():
                files[str(p.relative_to(out))] = p.read_bytes()
        runs.append(files)
    differing = sorted(k for k in runs[0] if runs[0][k] != runs[1].get(k))
    _detail(request, f"{len(runs[0])} files compared, {len(differing)} differ")
    assert runs[0].keys() == runs[1].keys()
    assert not differing, differing
