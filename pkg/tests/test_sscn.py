import math

import numpy as np
import pytest

from trajcast import ndgrad as nd
from trajcast.errors import ContractError
from trajcast.params import from_arrays, to_arrays, zeros_like
from trajcast.scene import GridSpec, Scene, Track, build_ground_truth_map
from trajcast.sscn import (
    SSCNConfig,
    SSCNDataset,
    build_dataset,
    build_map,
    cross_entropy,
    init_weights,
    sscn_forward,
    sscn_loss,
    train_sscn,
)
from trajcast.synth import ring_road_scene

TINY = SSCNConfig(num_classes=2, patch_size=10, context_size=12, filters=(2, 3), class_embed=3,
                  stream_width=4, merged=(5, 3))


def _batch(cfg, n, seed=0):
    rng = np.random.default_rng(seed)
    return SSCNDataset(
        classes=rng.integers(0, cfg.num_classes, size=n),
        patches=rng.uniform(size=(n, cfg.patch_size, cfg.patch_size, 3)),
        contexts=rng.uniform(size=(2, cfg.context_size, cfg.context_size, 3)),
        context_index=rng.integers(0, 2, size=n),
        targets=rng.uniform(size=n),
    )


def test_cross_entropy_analytic_values():
    half = nd.constant(np.array([[0.5]]))
    assert abs(cross_entropy(half, [0.5]).item() - math.log(2.0)) < 1e-9
    near_one = nd.constant(np.array([[1.0 - 1e-7]]))
    assert cross_entropy(near_one, [1.0]).item() == pytest.approx(1e-7, rel=1e-3)
    # clamp keeps a saturated prediction finite
    assert np.isfinite(cross_entropy(nd.constant(np.array([[1.0]])), [0.0]).item())


def test_loss_is_mean_of_individual_losses():
    w = init_weights(TINY, 1)
    b = _batch(TINY, 2, 3)
    pair = sscn_loss(b, w, TINY).item()
    singles = [sscn_loss(b, w, TINY, [i]).item() for i in range(2)]
    assert pair == pytest.approx(np.mean(singles), rel=1e-12)


def test_loss_permutation_invariant():
    w = init_weights(TINY, 1)
    b = _batch(TINY, 5, 4)
    assert sscn_loss(b, w, TINY, [0, 1, 2, 3, 4]).item() == pytest.approx(
        sscn_loss(b, w, TINY, [3, 1, 4, 0, 2]).item(), rel=1e-13
    )


def test_zero_weights_give_one_half():
    w = zeros_like(init_weights(TINY, 0))
    b = _batch(TINY, 4)
    out = sscn_forward(b.classes, b.patches, b.contexts, w, TINY, b.context_index).data
    assert np.all(out == 0.5)


def test_forward_deterministic_and_patch_sensitive():
    w = init_weights(TINY, 2)
    b = _batch(TINY, 2, 5)
    f = lambda p: sscn_forward(b.classes[:1].repeat(2), p, b.contexts, w, TINY, np.zeros(2, int)).data[:, 0]
    out = f(b.patches)
    assert np.array_equal(out, f(b.patches))
    swapped = f(b.patches[::-1])
    assert np.array_equal(swapped, out[::-1])
    assert out[0] != out[1]


def test_output_inside_unit_interval():
    w = init_weights(TINY, 3)
    b = _batch(TINY, 16, 6)
    out = sscn_forward(b.classes, b.patches, b.contexts, w, TINY, b.context_index).data
    assert np.all((out > 0) & (out < 1))


def test_identical_class_embeddings_give_identical_outputs():
    arrays = to_arrays(init_weights(TINY, 4))
    arrays["subject/embed"][1] = arrays["subject/embed"][0]
    w = from_arrays(arrays)
    b = _batch(TINY, 1, 7)
    outs = [sscn_forward([k], b.patches[:1], b.contexts, w, TINY, [0]).item() for k in (0, 1)]
    assert outs[0] == outs[1]


def test_class_out_of_range_is_contract_error():
    w = init_weights(TINY, 0)
    b = _batch(TINY, 1)
    with pytest.raises(ContractError):
        sscn_forward([2], b.patches, b.contexts, w, TINY, [0])


def test_loss_gradient_matches_finite_differences():
    cfg = TINY
    w = init_weights(cfg, 5)
    b = _batch(cfg, 3, 8)
    names = sorted(w)

    def fn(*tensors):
        return sscn_loss(b, dict(zip(names, tensors)), cfg)

    errs = nd.gradcheck(fn, [w[k] for k in names])
    worst = max(errs.values())
    assert worst < 1e-4, {names[i]: e for i, e in errs.items() if e >= 1e-4}


def test_zero_lr_leaves_weights_unchanged():
    w = init_weights(TINY, 0)
    before = to_arrays(w)
    b = _batch(TINY, 1)
    after, hist = train_sscn(b, TINY, weights=w, lr=0.0, epochs=1)
    for k, v in before.items():
        assert np.array_equal(after[k].data, v)
    assert len(hist.epoch_loss) == 1


def test_dataset_pairs_cells_with_ground_truth():
    grid = GridSpec(20)
    scene = ring_road_scene(0, size=80, cell=20, n_walkers=3)
    cfg = SSCNConfig(patch_size=16, context_size=16, filters=(2,), stream_width=4, merged=(4,))
    ds = build_dataset([scene], grid, cfg)
    gt = build_ground_truth_map(scene, 0, grid)
    assert len(ds) == 16
    for (si, r, c), t in zip(ds.cells, ds.targets):
        assert t == gt.grid[r, c]


def test_build_map_dimensions_and_zero_weights():
    tracks = {0: Track(0, 0, np.array([0]), np.array([[0.5, 0.5]]))}
    scene = Scene(np.zeros((50, 70, 3)), tracks)
    cfg = SSCNConfig(patch_size=16, context_size=16, filters=(2,), stream_width=4, merged=(4,))
    w = zeros_like(init_weights(cfg))
    m = build_map(scene, 0, w, GridSpec(20), cfg, chunk=5, threads=2)
    assert m.grid.shape == (3, 4)
    assert np.all(m.grid == 0.5)


def test_build_map_threads_do_not_change_result():
    scene = ring_road_scene(1, size=80, cell=20, n_walkers=2)
    cfg = SSCNConfig(patch_size=16, context_size=16, filters=(2,), stream_width=4, merged=(4,))
    w = init_weights(cfg, 9)
    a = build_map(scene, 0, w, GridSpec(20), cfg, chunk=3, threads=1)
    b = build_map(scene, 0, w, GridSpec(20), cfg, chunk=3, threads=3)
    assert np.array_equal(a.grid, b.grid)


def test_training_loss_decreases_over_first_epochs():
    grid = GridSpec(20)
    scene = ring_road_scene(2, size=120, cell=20, n_walkers=4)
    cfg = SSCNConfig(patch_size=24, context_size=24, filters=(4, 8), stream_width=16, merged=(16,))
    ds = build_dataset([scene], grid, cfg)
    _, hist = train_sscn(ds, cfg, lr=0.05, epochs=5, seed=0)
    assert hist.epoch_loss[-1] < hist.epoch_loss[0]
