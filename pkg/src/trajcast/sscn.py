"""Spatially static context network.

Three input streams (subject class, annulus patch around a grid cell, whole
scene) are merged into a single sigmoid unit that scores how likely a subject
of the class is to ever step on the cell.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndgrad as nd
from .errors import ContractError, TrainingError
from .params import Params, from_arrays
from .scene import GridSpec, LikelihoodMap, Scene, build_ground_truth_map, extract_patch, resize

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass(frozen=True)
class SSCNConfig:
    num_classes: int = 1
    patch_size: int = 64
    context_size: int = 64
    filters: tuple[int, ...] = (8, 16, 16)
    kernel: int = 3
    conv_stride: int = 1
    pool: int = 2
    class_embed: int = 8
    stream_width: int = 64
    merged: tuple[int, ...] = (128, 64)
    lrn_k: float = 2.0
    lrn_n: int = 5
    lrn_alpha: float = 1e-4
    lrn_beta: float = 0.75

    def __post_init__(self):
        dims = [self.num_classes, self.patch_size, self.context_size, self.kernel,
                self.conv_stride, self.pool, self.class_embed, self.stream_width,
                *self.filters, *self.merged]
        if any(int(d) <= 0 for d in dims):
            raise ContractError("SSCN dimensions must all be positive")
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "merged", tuple(int(m) for m in self.merged))
        for side in (self.patch_size, self.context_size):
            self.conv_output(side)

    def conv_output(self, side: int) -> int:
        for _ in self.filters:
            side = (side - self.kernel) // self.conv_stride + 1
            side //= self.pool
            if side < 1:
                raise ContractError(f"input side too small for conv stack: {self.filters}")
        return side

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        d["merged"] = list(self.merged)
        return d

    @classmethod
    def from_dict(cls, d) -> SSCNConfig:
        d = dict(d)
        for key in ("filters", "merged"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SSCNDataset:
    """Training triplets; contexts are shared per scene and indexed by ``context_index``."""

    classes: np.ndarray  # (N,) int
    patches: np.ndarray  # (N, d_P, d_P, 3)
    contexts: np.ndarray  # (S, d_I, d_I, 3)
    context_index: np.ndarray  # (N,) int
    targets: np.ndarray  # (N,) in [0, 1]
    cells: list[tuple[int, int, int]] = field(default_factory=list)  # (scene, row, col)

    def __len__(self) -> int:
        return len(self.targets)


def init_weights(cfg: SSCNConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    w["subject/embed"] = rng.normal(0.0, 0.5, size=(cfg.num_classes, cfg.class_embed))
    w["subject/dense/w"] = nd.glorot(rng, (cfg.class_embed, cfg.stream_width), cfg.class_embed, cfg.stream_width)
    w["subject/dense/b"] = np.zeros(cfg.stream_width)
    for stream, side in (("patch", cfg.patch_size), ("context", cfg.context_size)):
        c_in = 3
        for i, f in enumerate(cfg.filters):
            fan_in = c_in * cfg.kernel**2
            w[f"{stream}/conv{i}/w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(f, c_in, cfg.kernel, cfg.kernel))
            w[f"{stream}/conv{i}/b"] = np.zeros(f)
            c_in = f
        flat = c_in * cfg.conv_output(side) ** 2
        w[f"{stream}/dense/w"] = nd.glorot(rng, (flat, cfg.stream_width), flat, cfg.stream_width)
        w[f"{stream}/dense/b"] = np.zeros(cfg.stream_width)
    width = 3 * cfg.stream_width
    for i, m in enumerate(cfg.merged):
        w[f"merged{i}/w"] = nd.glorot(rng, (width, m), width, m)
        w[f"merged{i}/b"] = np.zeros(m)
        width = m
    w["out/w"] = nd.glorot(rng, (width, 1), width, 1)
    w["out/b"] = np.zeros(1)
    return from_arrays(w)


def _to_nchw(rasters: np.ndarray) -> np.ndarray:
    # centre pixel intensities around zero
    return np.ascontiguousarray(np.asarray(rasters, dtype=np.float64).transpose(0, 3, 1, 2)) - 0.5


def _conv_stream(x: nd.Tensor, w: Params, stream: str, cfg: SSCNConfig) -> nd.Tensor:
    for i in range(len(cfg.filters)):
        x = nd.conv2d(x, w[f"{stream}/conv{i}/w"], w[f"{stream}/conv{i}/b"], stride=cfg.conv_stride)
        x = nd.relu(x)
        x = nd.maxpool2d(x, cfg.pool)
        x = nd.local_response_norm(x, cfg.lrn_k, cfg.lrn_n, cfg.lrn_alpha, cfg.lrn_beta)
    x = nd.reshape(x, (x.shape[0], -1))
    return nd.relu(nd.linear(x, w[f"{stream}/dense/w"], w[f"{stream}/dense/b"]))


def sscn_logits(classes, patches, contexts, weights: Params, cfg: SSCNConfig, context_index=None) -> nd.Tensor:
    """Pre-sigmoid scores, shape (B, 1).

    ``contexts`` holds either one raster per example or a smaller set of
    scene rasters selected per example with ``context_index``.
    """
    classes = np.asarray(classes, dtype=np.intp).reshape(-1)
    if classes.size and (classes.min() < 0 or classes.max() >= cfg.num_classes):
        raise ContractError(f"class id outside [0, {cfg.num_classes})")
    patches = np.asarray(patches)
    contexts = np.asarray(contexts)
    B = classes.size
    if patches.shape != (B, cfg.patch_size, cfg.patch_size, 3):
        raise ContractError(f"patches must be {(B, cfg.patch_size, cfg.patch_size, 3)}, got {patches.shape}")
    if contexts.shape[1:] != (cfg.context_size, cfg.context_size, 3):
        raise ContractError(f"contexts must be (*, {cfg.context_size}, {cfg.context_size}, 3), got {contexts.shape}")
    if context_index is None:
        if contexts.shape[0] != B:
            raise ContractError("one context per example required when context_index is omitted")
        context_index = np.arange(B)
    context_index = np.asarray(context_index, dtype=np.intp)

    subj = nd.embedding(weights["subject/embed"], classes)
    subj = nd.relu(nd.linear(subj, weights["subject/dense/w"], weights["subject/dense/b"]))
    patch = _conv_stream(nd.constant(_to_nchw(patches)), weights, "patch", cfg)
    used, inverse = np.unique(context_index, return_inverse=True)
    ctx = _conv_stream(nd.constant(_to_nchw(contexts[used])), weights, "context", cfg)
    ctx = nd.take_rows(ctx, inverse)

    h = nd.concat([subj, patch, ctx], axis=1)
    for i in range(len(cfg.merged)):
        h = nd.relu(nd.linear(h, weights[f"merged{i}/w"], weights[f"merged{i}/b"]))
    return nd.linear(h, weights["out/w"], weights["out/b"])


def sscn_forward(classes, patches, contexts, weights: Params, cfg: SSCNConfig, context_index=None) -> nd.Tensor:
    """Likelihoods in (0, 1), shape (B, 1)."""
    return nd.sigmoid(sscn_logits(classes, patches, contexts, weights, cfg, context_index))


def cross_entropy(pred: nd.Tensor, target) -> nd.Tensor:
    """Mean binary cross-entropy with ``pred`` clamped to ``[1e-7, 1 - 1e-7]``."""
    t = nd.constant(np.asarray(target, dtype=np.float64).reshape(pred.shape))
    p = nd.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    one_minus_t = nd.constant(1.0 - t.data)
    ll = nd.add(nd.mul(t, nd.log(p)), nd.mul(one_minus_t, nd.log(nd.shift(-p, 1.0))))
    return -nd.mean(ll)


def sscn_loss(batch: SSCNDataset, weights: Params, cfg: SSCNConfig, idx=None) -> nd.Tensor:
    if idx is None:
        idx = np.arange(len(batch))
    idx = np.asarray(idx)
    if idx.size == 0:
        raise ContractError("sscn_loss: empty batch")
    pred = sscn_forward(
        batch.classes[idx], batch.patches[idx], batch.contexts, weights, cfg, batch.context_index[idx]
    )
    return cross_entropy(pred, batch.targets[idx])


def build_dataset(scenes: list[Scene], grid: GridSpec, cfg: SSCNConfig, classes=None) -> SSCNDataset:
    """Pair every (class, cell) of every scene with its ground-truth likelihood."""
    cls_l, patch_l, idx_l, tgt_l, cells, ctx_l = [], [], [], [], [], []
    for si, scene in enumerate(scenes):
        ctx_l.append(resize(scene.image, cfg.context_size))
        present = sorted({t.cls for t in scene.tracks.values()})
        wanted = present if classes is None else [c for c in classes if c in present]
        rows, cols = grid.shape(scene.height, scene.width)
        patches = {}
        for r in range(rows):
            for c in range(cols):
                patches[r, c] = resize(extract_patch(scene.image, (r, c), grid), cfg.patch_size)
        for k in wanted:
            gt = build_ground_truth_map(scene, k, grid)
            for r in range(rows):
                for c in range(cols):
                    cls_l.append(k)
                    patch_l.append(patches[r, c])
                    idx_l.append(si)
                    tgt_l.append(gt.grid[r, c])
                    cells.append((si, r, c))
    empty = (0, cfg.patch_size, cfg.patch_size, 3)
    return SSCNDataset(
        classes=np.array(cls_l, dtype=np.intp),
        patches=np.array(patch_l) if patch_l else np.zeros(empty),
        contexts=np.array(ctx_l) if ctx_l else np.zeros((0, cfg.context_size, cfg.context_size, 3)),
        context_index=np.array(idx_l, dtype=np.intp),
        targets=np.array(tgt_l, dtype=np.float64),
        cells=cells,
    )


@dataclass
class SSCNHistory:
    epoch_loss: list[float] = field(default_factory=list)


def train_sscn(
    dataset: SSCNDataset,
    cfg: SSCNConfig,
    weights: Params | None = None,
    lr: float = 0.002,
    batch_size: int = 32,
    epochs: int = 10,
    seed: int = 0,
    optimizer: str = "sgd",
) -> tuple[Params, SSCNHistory]:
    """Minibatch training on the cross-entropy loss.

    ``epoch_loss`` records the mean minibatch loss seen during each epoch.
    """
    weights = weights if weights is not None else init_weights(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    opt = nd.SGD(lr) if optimizer == "sgd" else nd.RMSProp(lr)
    history = SSCNHistory()
    n = len(dataset)
    if n == 0:
        raise ContractError("train_sscn: empty dataset")
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            loss = sscn_loss(dataset, weights, cfg, idx)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"SSCN loss became non-finite in epoch {epoch}")
            opt.step(weights, nd.backward(loss))
            total += value * len(idx)
        history.epoch_loss.append(total / n)
        log.info("sscn epoch %d loss %.5f", epoch, history.epoch_loss[-1])
    return weights, history


def build_map(
    scene: Scene,
    cls: int,
    weights: Params,
    grid: GridSpec,
    cfg: SSCNConfig,
    chunk: int = 64,
    threads: int = 1,
) -> LikelihoodMap:
    """Score every grid cell of ``scene`` for class ``cls``."""
    rows, cols = grid.shape(scene.height, scene.width)
    cells = [(r, c) for r in range(rows) for c in range(cols)]
    context = resize(scene.image, cfg.context_size)[None]

    def score(part):
        patches = np.array([resize(extract_patch(scene.image, rc, grid), cfg.patch_size) for rc in part])
        pred = sscn_forward(np.full(len(part), cls), patches, context, weights, cfg, np.zeros(len(part), dtype=np.intp))
        return pred.data[:, 0]

    parts = [cells[i : i + chunk] for i in range(0, len(cells), chunk)]
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(score, parts))
    else:
        values = [score(p) for p in parts]
    grid_vals = np.concatenate(values).reshape(rows, cols) if values else np.zeros((rows, cols))
    return LikelihoodMap(cls=cls, grid=grid_vals, cell_size=grid.cell_size)
