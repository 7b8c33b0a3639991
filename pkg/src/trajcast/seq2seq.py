"""Attention encoder-decoder with a bivariate Gaussian output head.

Two variants share the code path: ``d-att`` pools only the social tensor,
``sd-att`` additionally embeds the reachability tensor read from a static
likelihood map.  One parameter set is kept per subject class; all subjects of
a class share it.

Windows of ``obs_len + pred_len`` consecutive (subsampled) frames are the unit
of work.  Every subject present in all frames of a window is an *agent*;
agents of one window are encoded jointly so their social tensors can see each
other's hidden states from the previous step.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ndgrad as nd
from .errors import ContractError, DataError
from .params import Params, from_arrays
from .pooling import PoolConfig, reachability_tensor, social_indicator
from .scene import LikelihoodMap, Scene

log = logging.getLogger(__name__)

MODES = ("d-att", "sd-att")
LOG_2PI = math.log(2.0 * math.pi)
RHO_LIMIT = 1.0 - 1e-6


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 32
    window: int = 5
    pos_embed: int = 16
    social_embed: int = 32
    reach_embed: int = 16
    attn_dim: int = 32
    # displacement units of the head's mean output, in normalised scene coordinates
    offset_scale: float = 0.05
    # also feed the position embedding the last displacement divided by offset_scale
    embed_velocity: bool = True
    obs_len: int = 8
    pred_len: int = 12
    mode: str = "sd-att"
    pool: PoolConfig = field(default_factory=PoolConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 1 <= self.window <= self.obs_len:
            raise ContractError(f"attention window {self.window} must lie in [1, obs_len={self.obs_len}]")
        if self.pred_len < 1:
            raise ContractError("pred_len must be >= 1")
        if min(self.hidden, self.pos_embed, self.social_embed, self.reach_embed, self.attn_dim, self.offset_scale) <= 0:
            raise ContractError("model dimensions must be positive")
        if self.pool.hidden != self.hidden:
            object.__setattr__(self, "pool", replace(self.pool, hidden=self.hidden))

    @property
    def num_classes(self) -> int:
        return self.pool.num_classes

    @property
    def span(self) -> int:
        return self.obs_len + self.pred_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        d = dict(d)
        pool = PoolConfig(**d.pop("pool", {}))
        return cls(pool=pool, **d)


@dataclass
class GaussianParams:
    """Per-step bivariate normal parameters; leading axes are free."""

    mu: np.ndarray  # (..., 2)
    sigma: np.ndarray  # (..., 2)
    rho: np.ndarray  # (...)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.mu, self.sigma, self.rho[..., None]], axis=-1)


@dataclass
class EncoderState:
    h: nd.Tensor
    c: nd.Tensor
    history: list[nd.Tensor] = field(default_factory=list)
    window: int = 5

    def push(self, h: nd.Tensor) -> None:
        self.history.append(h)
        if len(self.history) > self.window:
            self.history.pop(0)


@dataclass
class AttentionState:
    weights: nd.Tensor  # (N, k)
    context: nd.Tensor  # (N, d_H)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _prefix(cls: int) -> str:
    return f"class{cls}/"


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    H = cfg.hidden
    w: dict[str, np.ndarray] = {}
    social_in = cfg.pool.social_cells * H
    reach_in = cfg.pool.reach_side**2
    enc_in = cfg.pos_embed + cfg.social_embed + (cfg.reach_embed if cfg.mode == "sd-att" else 0)

    def dense(name, n_in, n_out):
        w[name + "/w"] = nd.glorot(rng, (n_in, n_out), n_in, n_out)
        w[name + "/b"] = np.zeros(n_out)

    def lstm(name, n_in):
        w[name + "/wx"] = nd.glorot(rng, (n_in, 4 * H), n_in, 4 * H)
        w[name + "/wh"] = nd.glorot(rng, (H, 4 * H), H, 4 * H)
        b = np.zeros(4 * H)
        b[H : 2 * H] = 1.0  # forget gate
        w[name + "/b"] = b

    for k in range(cfg.num_classes):
        p = _prefix(k)
        dense(p + "embed/pos", 4 if cfg.embed_velocity else 2, cfg.pos_embed)
        dense(p + "embed/social", social_in, cfg.social_embed)
        if cfg.mode == "sd-att":
            dense(p + "embed/reach", reach_in, cfg.reach_embed)
        lstm(p + "enc", enc_in)
        w[p + "att/ws"] = nd.glorot(rng, (H, cfg.attn_dim), H, cfg.attn_dim)
        w[p + "att/wh"] = nd.glorot(rng, (H, cfg.attn_dim), H, cfg.attn_dim)
        w[p + "att/b"] = np.zeros(cfg.attn_dim)
        w[p + "att/v"] = nd.glorot(rng, (cfg.attn_dim, 1), cfg.attn_dim, 1)
        lstm(p + "dec", (4 if cfg.embed_velocity else 2) + H)
        w[p + "out/w"] = nd.glorot(rng, (H, 5), H, 5)
        w[p + "out/b"] = np.zeros(5)
    return from_arrays(w)


def class_params(params: Params, cls: int) -> Params:
    p = _prefix(cls)
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def embed_inputs(x: nd.Tensor, social: nd.Tensor, reach: nd.Tensor | None, w: Params, mode: str) -> nd.Tensor:
    """Sigmoid embeddings of position, flattened social tensor and (sd-att) reachability."""
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    if (mode == "sd-att") != (reach is not None):
        raise ContractError(f"mode {mode!r} {'requires' if mode == 'sd-att' else 'does not take'} a reachability input")
    parts = [
        nd.sigmoid(nd.linear(x, w["embed/pos/w"], w["embed/pos/b"])),
        nd.sigmoid(nd.linear(social, w["embed/social/w"], w["embed/social/b"])),
    ]
    if reach is not None:
        parts.append(nd.sigmoid(nd.linear(reach, w["embed/reach/w"], w["embed/reach/b"])))
    return nd.concat(parts, axis=1)


def lstm_cell(x: nd.Tensor, h: nd.Tensor, c: nd.Tensor, w: Params, name: str) -> tuple[nd.Tensor, nd.Tensor]:
    """Standard LSTM update with gate order (input, forget, output, candidate)."""
    H = h.shape[1]
    gates = nd.bias_add(nd.add(nd.matmul(x, w[name + "/wx"]), nd.matmul(h, w[name + "/wh"])), w[name + "/b"])
    i = nd.sigmoid(nd.slice_cols(gates, 0, H))
    f = nd.sigmoid(nd.slice_cols(gates, H, 2 * H))
    o = nd.sigmoid(nd.slice_cols(gates, 2 * H, 3 * H))
    g = nd.tanh(nd.slice_cols(gates, 3 * H, 4 * H))
    c_new = nd.add(nd.mul(f, c), nd.mul(i, g))
    return nd.mul(o, nd.tanh(c_new)), c_new


def encoder_step(state: EncoderState, inp: nd.Tensor, w: Params) -> EncoderState:
    h, c = lstm_cell(inp, state.h, state.c, w, "enc")
    new = EncoderState(h, c, list(state.history), state.window)
    new.push(h)
    return new


def attention(history: Sequence[nd.Tensor], s_prev: nd.Tensor, w: Params, keys: Sequence[nd.Tensor] | None = None) -> AttentionState:
    """Additive scores ``v . tanh(W_s s + W_h h_j + b)`` softmaxed over the window."""
    if not history:
        raise ContractError("attention over an empty history")
    if keys is None:
        keys = [nd.matmul(h, w["att/wh"]) for h in history]
    q = nd.matmul(s_prev, w["att/ws"])
    scores = [
        nd.matmul(nd.tanh(nd.bias_add(nd.add(q, k), w["att/b"])), w["att/v"]) for k in keys
    ]
    alpha = nd.softmax(nd.concat(scores, axis=1))
    ctx = None
    for j, h in enumerate(history):
        term = nd.mul_col(h, nd.slice_cols(alpha, j, j + 1))
        ctx = term if ctx is None else nd.add(ctx, term)
    return AttentionState(alpha, ctx)


def decoder_step(s_prev: nd.Tensor, cell_prev: nd.Tensor, x_prev: nd.Tensor, ctx: nd.Tensor, w: Params):
    """LSTM update on ``concat(x_prev, context)``; returns ``(s, cell)``."""
    return lstm_cell(nd.concat([x_prev, ctx], axis=1), s_prev, cell_prev, w, "dec")


@dataclass
class HeadOutput:
    mu: nd.Tensor  # (N, 2)
    log_sigma: nd.Tensor  # (N, 2)
    rho: nd.Tensor  # (N, 1)

    def numpy(self) -> GaussianParams:
        return GaussianParams(self.mu.data.copy(), np.exp(self.log_sigma.data), self.rho.data[:, 0].copy())


def gaussian_head(s: nd.Tensor, w: Params, anchor: nd.Tensor | None = None, offset_scale: float = 1.0) -> HeadOutput:
    """Raw 5-vector ``o = W_o s + b``: ``mu = anchor + offset_scale * o[:2]``,
    ``sigma = exp(o[2:4])``, ``rho = tanh(o[4])``.

    ``anchor`` is the previous position; when omitted ``mu = offset_scale * o[:2]``.
    """
    o = nd.linear(s, w["out/w"], w["out/b"])
    mu = nd.slice_cols(o, 0, 2)
    if offset_scale != 1.0:
        mu = nd.scale(mu, offset_scale)
    if anchor is not None:
        mu = nd.add(anchor, mu)
    rho = nd.clip(nd.tanh(nd.slice_cols(o, 4, 5)), -RHO_LIMIT, RHO_LIMIT)
    return HeadOutput(mu, nd.slice_cols(o, 2, 4), rho)


def bivariate_nll(mu: nd.Tensor, log_sigma: nd.Tensor, rho: nd.Tensor, x) -> nd.Tensor:
    """Negative log density of a bivariate normal at ``x``; one value per row, shape (N, 1)."""
    x = nd.constant(np.asarray(x.data if isinstance(x, nd.Tensor) else x, dtype=np.float64))
    z = nd.div(nd.sub(x, mu), nd.exp(log_sigma))
    z1, z2 = nd.slice_cols(z, 0, 1), nd.slice_cols(z, 1, 2)
    one_m = nd.shift(-nd.square(rho), 1.0)
    quad = nd.sub(nd.add(nd.square(z1), nd.square(z2)), nd.scale(nd.mul(rho, nd.mul(z1, z2)), 2.0))
    terms = nd.add(
        nd.add(nd.sum_cols(log_sigma), nd.scale(nd.log(one_m), 0.5)),
        nd.scale(nd.div(quad, one_m), 0.5),
    )
    return nd.shift(terms, LOG_2PI)


def nll(theta: GaussianParams, x) -> float:
    """Scalar convenience wrapper around :func:`bivariate_nll` for one distribution."""
    mu = nd.constant(np.asarray(theta.mu, dtype=float).reshape(1, 2))
    ls = nd.constant(np.log(np.asarray(theta.sigma, dtype=float)).reshape(1, 2))
    rho = nd.constant(np.asarray(theta.rho, dtype=float).reshape(1, 1))
    return bivariate_nll(mu, ls, rho, np.asarray(x, dtype=float).reshape(1, 2)).item()


def sample(theta: GaussianParams, rng: np.random.Generator) -> np.ndarray:
    """Draw through the Cholesky factor ``[[sx, 0], [sy*rho, sy*sqrt(1-rho^2)]]``."""
    mu = np.asarray(theta.mu, dtype=float)
    sigma = np.asarray(theta.sigma, dtype=float)
    rho = np.asarray(theta.rho, dtype=float)
    z = rng.standard_normal(mu.shape)
    z1, z2 = z[..., 0], z[..., 1]
    x = mu[..., 0] + sigma[..., 0] * z1
    y = mu[..., 1] + sigma[..., 1] * (rho * z1 + np.sqrt(1.0 - rho * rho) * z2)
    return np.stack([x, y], axis=-1)


# ---------------------------------------------------------------------------
# Windows and batching
# ---------------------------------------------------------------------------


@dataclass
class Window:
    """Agents that are present in every frame ``start .. start + span - 1``."""

    scene_index: int
    start: int
    subject_ids: np.ndarray  # (N,)
    classes: np.ndarray  # (N,)
    positions: np.ndarray  # (N, span, 2)
    social: np.ndarray | None = None  # (obs_len, N * K, N)
    reach: np.ndarray | None = None  # (N, obs_len, n_R^2)

    def __len__(self) -> int:
        return len(self.subject_ids)


def extract_windows(
    scene: Scene,
    cfg: ModelConfig,
    maps: Mapping[int, LikelihoodMap] | None = None,
    stride: int = 1,
    scene_index: int = 0,
    strict: bool = False,
) -> list[Window]:
    """Cut a subsampled scene into windows and precompute pooling inputs.

    Tracks shorter than ``obs_len + pred_len`` can never be agents; they are
    skipped with a warning, or rejected when ``strict``.
    """
    L = cfg.span
    short = [sid for sid, t in scene.tracks.items() if len(t) < L]
    if short:
        msg = f"{len(short)} trajectories shorter than {L} steps are skipped"
        if strict:
            raise DataError(msg)
        log.warning(msg)
    if cfg.mode == "sd-att" and maps is None:
        raise ContractError("sd-att windows need likelihood maps")
    frames = scene.frames()
    if frames.size == 0:
        return []
    windows = []
    for start in range(int(frames.min()), int(frames.max()) - L + 2, stride):
        wanted = np.arange(start, start + L)
        ids, classes, pos = [], [], []
        for sid, t in sorted(scene.tracks.items()):
            if len(t) < L:
                continue
            i = np.searchsorted(t.frames, start)
            if i + L <= len(t.frames) and np.array_equal(t.frames[i : i + L], wanted):
                ids.append(sid)
                classes.append(t.cls)
                pos.append(t.positions[i : i + L])
        if not ids:
            continue
        win = Window(scene_index, start, np.array(ids), np.array(classes, dtype=np.intp), np.array(pos))
        _prepare(win, scene, cfg, maps)
        windows.append(win)
    return windows


def _prepare(win: Window, scene: Scene, cfg: ModelConfig, maps) -> None:
    n = len(win)
    K = cfg.pool.social_cells
    soc = np.empty((cfg.obs_len, n * K, n))
    for t in range(cfg.obs_len):
        ind = social_indicator(win.positions[:, t], win.classes, cfg.pool, win.subject_ids)
        soc[t] = ind.reshape(n * K, n)
    win.social = soc
    if cfg.mode == "sd-att":
        side = cfg.pool.reach_side
        reach = np.zeros((n, cfg.obs_len, side * side))
        for a in range(n):
            lmap = maps.get(int(win.classes[a]))
            if lmap is None:
                raise DataError(f"no likelihood map for class {win.classes[a]}")
            for t in range(cfg.obs_len):
                reach[a, t] = reachability_tensor(win.positions[a, t], lmap, cfg.pool, scene.width, scene.height).ravel()
        win.reach = reach


@dataclass
class Batch:
    positions: np.ndarray  # (B, span, 2)
    classes: np.ndarray  # (B,)
    social: np.ndarray  # (obs_len, B * K, B), block diagonal over windows
    reach: np.ndarray | None  # (B, obs_len, n_R^2)
    windows: list[Window]

    def __len__(self) -> int:
        return len(self.classes)


def collate(windows: Sequence[Window], cfg: ModelConfig) -> Batch:
    if not windows:
        raise ContractError("collate: no windows")
    K = cfg.pool.social_cells
    sizes = [len(w) for w in windows]
    B = sum(sizes)
    social = np.zeros((cfg.obs_len, B, K, B))
    lo = 0
    for w, n in zip(windows, sizes):
        social[:, lo : lo + n, :, lo : lo + n] = w.social.reshape(cfg.obs_len, n, K, n)
        lo += n
    reach = np.concatenate([w.reach for w in windows]) if cfg.mode == "sd-att" else None
    return Batch(
        positions=np.concatenate([w.positions for w in windows]),
        classes=np.concatenate([w.classes for w in windows]),
        social=social.reshape(cfg.obs_len, B * K, B),
        reach=reach,
        windows=list(windows),
    )


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------


@dataclass
class ModelOutput:
    loss: nd.Tensor  # mean over agents of the per-trajectory NLL sum
    step_nll: nd.Tensor  # (B, n_pred)
    gaussians: GaussianParams  # arrays (B, n_pred, ...)
    points: np.ndarray  # (B, n_pred, 2) decoder feedback positions
    attention: list[np.ndarray]  # per prediction step, (B, k)
    encoder_hidden: list[np.ndarray]  # per observed step, (B, d_H)


def _by_class(classes: np.ndarray, num_classes: int):
    """Yield ``(cls, row indices)`` for classes present, plus the inverse permutation."""
    groups = [(k, np.flatnonzero(classes == k)) for k in range(num_classes)]
    groups = [(k, idx) for k, idx in groups if idx.size]
    order = np.concatenate([idx for _, idx in groups])
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return groups, inverse


def _apply_per_class(fn, classes, num_classes, params, *tensors):
    """Run ``fn(class_params, *row_subsets)`` per class and reassemble rows in input order."""
    groups, inverse = _by_class(classes, num_classes)
    if len(groups) == 1:
        return fn(class_params(params, groups[0][0]), *tensors)
    outs = []
    for k, idx in groups:
        outs.append(fn(class_params(params, k), *[nd.take_rows(t, idx) for t in tensors]))
    if isinstance(outs[0], tuple):
        return tuple(nd.take_rows(nd.concat([o[i] for o in outs], axis=0), inverse) for i in range(len(outs[0])))
    return nd.take_rows(nd.concat(outs, axis=0), inverse)


def position_features(positions: np.ndarray, t: int, cfg: ModelConfig) -> np.ndarray:
    """Encoder coordinate input at step ``t``: the position, plus its scaled displacement when enabled."""
    x = positions[:, t]
    if not cfg.embed_velocity:
        return x
    d = (x - positions[:, t - 1]) / cfg.offset_scale if t > 0 else np.zeros_like(x)
    return np.concatenate([x, d], axis=1)


def run_model(
    params: Params,
    batch: Batch,
    cfg: ModelConfig,
    decoder_input: str = "teacher",
    rng: np.random.Generator | None = None,
    pred_len: int | None = None,
) -> ModelOutput:
    """Encode the observed steps and decode ``pred_len`` Gaussian steps.

    ``decoder_input`` picks the previous position fed to the decoder:
    ``teacher`` (ground truth), ``sample`` (draw from the last prediction) or
    ``mean`` (the last predicted mean).
    """
    if decoder_input not in ("teacher", "sample", "mean"):
        raise ContractError(f"unknown decoder_input {decoder_input!r}")
    if decoder_input == "sample" and rng is None:
        raise ContractError("sampling needs an rng")
    n_pred = cfg.pred_len if pred_len is None else pred_len
    if cfg.obs_len + n_pred > batch.positions.shape[1] and decoder_input == "teacher":
        raise ContractError("teacher forcing needs ground truth for every predicted step")
    B, H, C = len(batch), cfg.hidden, cfg.num_classes
    classes = batch.classes
    K = cfg.pool.social_cells

    state = EncoderState(nd.constant(np.zeros((B, H))), nd.constant(np.zeros((B, H))), [], cfg.window)
    enc_hidden = []
    for t in range(cfg.obs_len):
        x_t = nd.constant(position_features(batch.positions, t, cfg))
        pooled = nd.matmul(nd.constant(batch.social[t]), state.h)  # social tensor of every agent from h at t-1
        social = nd.reshape(pooled, (B, K * H))
        reach = nd.constant(batch.reach[:, t]) if cfg.mode == "sd-att" else None
        tensors = (x_t, social) + ((reach,) if reach is not None else ())

        def enc(w, x, s, r=None):
            return embed_inputs(x, s, r, w, cfg.mode)

        inp = _apply_per_class(enc, classes, C, params, *tensors)

        def step(w, i, h, c):
            return lstm_cell(i, h, c, w, "enc")

        h, c = _apply_per_class(step, classes, C, params, inp, state.h, state.c)
        state = EncoderState(h, c, list(state.history), cfg.window)
        state.push(h)
        enc_hidden.append(h.data)

    history = state.history
    s, cell = state.h, state.c
    x_prev_np = batch.positions[:, cfg.obs_len - 1]
    x_before_np = batch.positions[:, cfg.obs_len - 2] if cfg.obs_len > 1 else x_prev_np
    nll_steps, gauss, points, attn = [], [], [], []
    keys = [
        _apply_per_class(lambda w, hh: nd.matmul(hh, w["att/wh"]), classes, C, params, h_j) for h_j in history
    ]
    for j in range(n_pred):
        x_prev = nd.constant(x_prev_np)
        if cfg.embed_velocity:
            x_in = nd.constant(np.concatenate([x_prev_np, (x_prev_np - x_before_np) / cfg.offset_scale], axis=1))
        else:
            x_in = x_prev

        def dec(w, s_, cell_, xp, xi, *hist_keys):
            hist, ks = hist_keys[: len(history)], hist_keys[len(history) :]
            att = attention(hist, s_, w, ks)
            s_new, c_new = decoder_step(s_, cell_, xi, att.context, w)
            head = gaussian_head(s_new, w, anchor=xp, offset_scale=cfg.offset_scale)
            return s_new, c_new, head.mu, head.log_sigma, head.rho, att.weights

        s, cell, mu, log_sigma, rho, alpha = _apply_per_class(
            dec, classes, C, params, s, cell, x_prev, x_in, *history, *keys
        )
        head = HeadOutput(mu, log_sigma, rho)
        attn.append(alpha.data)
        g = head.numpy()
        gauss.append(g)
        if cfg.obs_len + j < batch.positions.shape[1]:
            nll_steps.append(bivariate_nll(mu, log_sigma, rho, batch.positions[:, cfg.obs_len + j]))
        x_before_np = x_prev_np
        if decoder_input == "teacher":
            x_prev_np = batch.positions[:, cfg.obs_len + j]
        elif decoder_input == "mean":
            x_prev_np = g.mu
        else:
            x_prev_np = sample(g, rng)
        points.append(x_prev_np)

    if nll_steps:
        step_nll = nd.concat(nll_steps, axis=1)
        loss = nd.scale(nd.sum(step_nll), 1.0 / B)
    else:
        step_nll = nd.constant(np.zeros((B, 0)))
        loss = nd.constant(0.0)
    if gauss:
        gaussians = GaussianParams(
            np.stack([g.mu for g in gauss], axis=1),
            np.stack([g.sigma for g in gauss], axis=1),
            np.stack([g.rho for g in gauss], axis=1),
        )
        pts = np.stack(points, axis=1)
    else:
        gaussians = GaussianParams(np.zeros((B, 0, 2)), np.zeros((B, 0, 2)), np.zeros((B, 0)))
        pts = np.zeros((B, 0, 2))
    return ModelOutput(loss, step_nll, gaussians, pts, attn, enc_hidden)


def model_loss(params: Params, batch: Batch, cfg: ModelConfig) -> nd.Tensor:
    """Teacher-forced training loss: mean over agents of the NLL summed over predicted steps."""
    return run_model(params, batch, cfg, "teacher").loss


@dataclass
class Prediction:
    scene_index: int
    start: int
    subject_ids: np.ndarray
    observed: np.ndarray  # (N, obs_len, 2)
    truth: np.ndarray  # (N, pred_len, 2)
    points: np.ndarray  # (N, n_pred, 2)
    gaussians: GaussianParams


def rollout(
    params: Params,
    windows: Sequence[Window],
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    point: str = "sample",
    pred_len: int | None = None,
) -> list[Prediction]:
    """Predict every agent of every window; agents of a window advance in lockstep."""
    preds = []
    n_pred = cfg.pred_len if pred_len is None else pred_len
    for win in windows:
        batch = collate([win], cfg)
        out = run_model(params, batch, cfg, point, rng, pred_len=n_pred)
        preds.append(
            Prediction(
                win.scene_index,
                win.start,
                win.subject_ids,
                win.positions[:, : cfg.obs_len],
                win.positions[:, cfg.obs_len : cfg.obs_len + n_pred],
                out.points,
                out.gaussians,
            )
        )
    return preds
