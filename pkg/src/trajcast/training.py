"""Training loops, displacement metrics and the leave-one-out harness."""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndgrad as nd
from .errors import ContractError, TrainingError
from .params import Params, to_arrays
from .scene import LikelihoodMap, Scene, scene_fingerprint
from .seq2seq import ModelConfig, Prediction, Window, collate, extract_windows, init_params, model_loss, rollout

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _displacements(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction shape {pred.shape} != ground truth shape {truth.shape}")
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    if pred.ndim != 3 or pred.shape[-1] != 2 or pred.shape[1] < 1:
        raise ContractError(f"expected (subjects, steps, 2) with steps >= 1, got {pred.shape}")
    return np.linalg.norm(pred - truth, axis=-1)


def ade(pred, truth) -> float:
    """Mean Euclidean error pooled over every step of every subject."""
    return float(_displacements(pred, truth).mean())


def fde(pred, truth) -> float:
    """Mean Euclidean error at the last step."""
    return float(_displacements(pred, truth)[:, -1].mean())


@dataclass
class EvalReport:
    ade: float
    fde: float
    per_trajectory: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def report_from_predictions(preds: Sequence[Prediction], config: Mapping | None = None) -> EvalReport:
    if not preds:
        return EvalReport(float("nan"), float("nan"), [], dict(config or {}))
    pred = np.concatenate([p.points for p in preds])
    truth = np.concatenate([p.truth for p in preds])
    disp = _displacements(pred, truth)
    rows = []
    for p in preds:
        d = _displacements(p.points, p.truth)
        for sid, di in zip(p.subject_ids, d):
            rows.append(
                {"scene": int(p.scene_index), "start": int(p.start), "subject": int(sid),
                 "ade": float(di.mean()), "fde": float(di[-1])}
            )
    return EvalReport(float(disp.mean()), float(disp[:, -1].mean()), rows, dict(config or {}))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainHistory:
    epoch_nll: list[float] = field(default_factory=list)


class TrainingAborted(TrainingError):
    """Raised on a non-finite loss; ``last_good`` holds the parameters before the bad step."""

    def __init__(self, message: str, last_good: dict[str, np.ndarray], history: TrainHistory):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


def scene_windows(
    scenes: Sequence[Scene],
    cfg: ModelConfig,
    maps: Sequence[Mapping[int, LikelihoodMap]] | None = None,
    stride: int = 1,
) -> list[Window]:
    out = []
    for i, scene in enumerate(scenes):
        m = maps[i] if maps is not None else None
        out.extend(extract_windows(scene, cfg, m, stride=stride, scene_index=i))
    return out


def train_model(
    scenes: Sequence[Scene],
    cfg: ModelConfig,
    maps: Sequence[Mapping[int, LikelihoodMap]] | None = None,
    lr: float = 0.003,
    optimizer: str = "rmsprop",
    epochs: int = 20,
    seed: int = 0,
    windows_per_batch: int = 1,
    window_stride: int = 1,
    params: Params | None = None,
    windows: Sequence[Window] | None = None,
) -> tuple[Params, TrainHistory]:
    """Joint backprop over windows of subsampled scenes.

    Each update covers ``windows_per_batch`` windows; the loss is the mean over
    agents of the NLL summed over predicted steps.  ``epoch_nll`` is the
    agent-weighted mean of that loss across the epoch's updates.
    """
    if optimizer not in ("rmsprop", "sgd"):
        raise ContractError(f"unknown optimizer {optimizer!r}")
    params = params if params is not None else init_params(cfg, seed)
    if windows is None:
        windows = scene_windows(scenes, cfg, maps, window_stride)
    if not windows:
        raise ContractError("no training windows: trajectories must span obs_len + pred_len steps")
    opt = nd.RMSProp(lr) if optimizer == "rmsprop" else nd.SGD(lr)
    rng = np.random.default_rng([seed, 1])
    history = TrainHistory()
    for epoch in range(epochs):
        order = rng.permutation(len(windows))
        total, count = 0.0, 0
        for lo in range(0, len(order), windows_per_batch):
            batch = collate([windows[i] for i in order[lo : lo + windows_per_batch]], cfg)
            loss = model_loss(params, batch, cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingAborted(f"non-finite loss in epoch {epoch}", to_arrays(params), history)
            grads = nd.backward(loss)
            snapshot = to_arrays(params)
            try:
                opt.step(params, grads)
            except TrainingError as exc:
                raise TrainingAborted(str(exc), snapshot, history) from exc
            total += value * len(batch)
            count += len(batch)
        history.epoch_nll.append(total / count)
        log.info("epoch %d mean NLL %.5f", epoch, history.epoch_nll[-1])
    return params, history


def evaluate(
    params: Params,
    scenes: Sequence[Scene],
    cfg: ModelConfig,
    maps: Sequence[Mapping[int, LikelihoodMap]] | None = None,
    seed: int = 0,
    point: str = "sample",
    window_stride: int = 1,
    windows: Sequence[Window] | None = None,
    config: Mapping | None = None,
) -> tuple[EvalReport, list[Prediction]]:
    """Roll the model out on every window and pool ADE/FDE."""
    if windows is None:
        windows = scene_windows(scenes, cfg, maps, window_stride)
    rng = np.random.default_rng([seed, 2])
    preds = rollout(params, windows, cfg, rng=rng, point=point)
    echo = {"model": cfg.to_dict(), "point": point, "seed": seed}
    echo.update(config or {})
    return report_from_predictions(preds, echo), preds


def leave_one_out(
    scenes: Sequence[Scene],
    cfg: ModelConfig,
    maps: Sequence[Mapping[int, LikelihoodMap]] | None = None,
    seed: int = 0,
    point: str = "sample",
    **train_kwargs,
) -> list[EvalReport]:
    """Train on all scenes but one and evaluate on the held-out scene, for each scene.

    Training scenes are put in a canonical order (by content hash) so a fold's
    result does not depend on how the caller ordered ``scenes``.  Reports come
    back in the caller's order.
    """
    if len(scenes) < 2:
        raise ContractError("leave-one-out needs at least two scenes")
    prints = [scene_fingerprint(s) for s in scenes]
    canonical = sorted(range(len(scenes)), key=lambda i: (prints[i], i))
    reports = []
    for held in range(len(scenes)):
        rest = [i for i in canonical if i != held]
        params, hist = train_model(
            [scenes[i] for i in rest], cfg, [maps[i] for i in rest] if maps is not None else None,
            seed=seed, **train_kwargs,
        )
        report, _ = evaluate(
            params, [scenes[held]], cfg, [maps[held]] if maps is not None else None, seed=seed, point=point,
            config={"held_out": prints[held][:16], "final_train_nll": hist.epoch_nll[-1] if hist.epoch_nll else None},
        )
        reports.append(report)
    return reports
