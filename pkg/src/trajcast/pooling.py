"""Social (dynamic) and reachability (static) context pooling."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError
from .scene import LikelihoodMap


@dataclass(frozen=True)
class PoolConfig:
    """Pooling geometry.

    ``neighborhood`` (normalised units) is split into ``social_grid`` cells per
    side; ``reach_size`` and ``reach_cell`` are in pixels.
    """

    neighborhood: float = 0.2
    social_grid: int = 4
    hidden: int = 32
    num_classes: int = 1
    reach_size: int = 60
    reach_cell: int = 20
    max_neighbors: int = 40

    def __post_init__(self):
        if self.social_grid < 1:
            raise ContractError("social_grid must be >= 1")
        if self.hidden <= 0 or self.num_classes <= 0 or self.neighborhood <= 0:
            raise ContractError("hidden, num_classes and neighborhood must be positive")
        if self.reach_cell <= 0 or self.reach_size <= 0 or self.reach_size % self.reach_cell:
            raise ContractError("reach_size must be a positive multiple of reach_cell")

    @property
    def reach_side(self) -> int:
        return self.reach_size // self.reach_cell

    @property
    def social_cells(self) -> int:
        """Rows of the flattened social tensor before the hidden axis: g_s * g_s * C."""
        return self.social_grid * self.social_grid * self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)


def social_cell(target_pos, pos, cfg: PoolConfig) -> tuple[int, int] | None:
    """Grid cell ``(row, col)`` of ``pos`` in the window around ``target_pos``, or None."""
    step = cfg.neighborhood / cfg.social_grid
    c = math.floor((pos[0] - target_pos[0] + 0.5 * cfg.neighborhood) / step)
    r = math.floor((pos[1] - target_pos[1] + 0.5 * cfg.neighborhood) / step)
    if 0 <= r < cfg.social_grid and 0 <= c < cfg.social_grid:
        return r, c
    return None


def social_tensor(target_pos, neighbors: Sequence[tuple[int, Sequence[float], np.ndarray]], cfg: PoolConfig) -> np.ndarray:
    """Sum neighbours' hidden vectors into a ``(g_s, g_s, d_H, C)`` array.

    ``neighbors`` are ``(class, position, hidden)`` triples for the other
    subjects in the frame; the target itself must not be included.
    """
    g = cfg.social_grid
    out = np.zeros((g, g, cfg.hidden, cfg.num_classes))
    for cls, pos, h in neighbors:
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (cfg.hidden,):
            raise ContractError(f"hidden state has shape {h.shape}, expected ({cfg.hidden},)")
        if not 0 <= cls < cfg.num_classes:
            raise ContractError(f"class {cls} outside [0, {cfg.num_classes})")
        cell = social_cell(target_pos, pos, cfg)
        if cell is not None:
            out[cell[0], cell[1], :, cls] += h
    return out


def truncate_neighbors(frame_subjects: Sequence[tuple[int, Sequence[float]]], target_pos, max_n: int = 40):
    """Keep the ``max_n`` subjects nearest ``target_pos``; ties go to the lower id.

    ``frame_subjects`` is a list of ``(subject_id, position)`` pairs.  The kept
    subjects are returned in their input order.
    """
    if len(frame_subjects) <= max_n:
        return list(frame_subjects)
    t = np.asarray(target_pos, dtype=np.float64)
    ranked = sorted(
        frame_subjects,
        key=lambda item: (float(np.sum((np.asarray(item[1], dtype=np.float64) - t) ** 2)), item[0]),
    )
    keep = {sid for sid, _ in ranked[:max_n]}
    return [item for item in frame_subjects if item[0] in keep]


def social_indicator(positions: np.ndarray, classes: np.ndarray, cfg: PoolConfig, ids=None) -> np.ndarray:
    """Indicator array ``I`` of shape ``(N, g_s, g_s, C, N)`` for one frame.

    ``I[i, r, c, s, j] = 1`` when subject ``j`` (of class ``s``) is one of the
    ``max_neighbors`` nearest neighbours of ``i`` and lies in cell ``(r, c)``
    of ``i``'s window.  Then ``einsum('ircsj,jd->ircsd', I, H)`` is every
    subject's social tensor with the class and hidden axes swapped.
    """
    positions = np.asarray(positions, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.intp)
    n = len(positions)
    g = cfg.social_grid
    ids = np.arange(n) if ids is None else np.asarray(ids)
    out = np.zeros((n, g, g, cfg.num_classes, n))
    if n < 2:
        return out
    step = cfg.neighborhood / g
    rel = positions[None, :, :] - positions[:, None, :]  # rel[i, j] = x_j - x_i
    col = np.floor((rel[..., 0] + 0.5 * cfg.neighborhood) / step).astype(np.int64)
    row = np.floor((rel[..., 1] + 0.5 * cfg.neighborhood) / step).astype(np.int64)
    inside = (row >= 0) & (row < g) & (col >= 0) & (col < g)
    np.fill_diagonal(inside, False)
    if n - 1 > cfg.max_neighbors:
        d2 = np.sum(rel * rel, axis=-1)
        for i in range(n):
            others = [j for j in range(n) if j != i]
            ranked = sorted(others, key=lambda j: (d2[i, j], ids[j]))
            drop = ranked[cfg.max_neighbors :]
            inside[i, drop] = False
    ii, jj = np.nonzero(inside)
    out[ii, row[ii, jj], col[ii, jj], classes[jj], jj] = 1.0
    return out


def reachability_tensor(target_pos, lmap: LikelihoodMap, cfg: PoolConfig, width: int, height: int) -> np.ndarray:
    """Map values at a ``(d_R/g_p)^2`` lattice of cell centres around the target.

    Cell centres sit at offsets ``(j - (n - 1) / 2) * g_p`` pixels from the
    target on each axis.  Centres outside the image read as 0.
    """
    n = cfg.reach_side
    cell = lmap.cell_size
    if cell <= 0:
        raise ContractError("likelihood map has no cell_size; cannot locate cells")
    offsets = (np.arange(n) - (n - 1) / 2.0) * cfg.reach_cell
    px = float(target_pos[0]) * width + offsets
    py = float(target_pos[1]) * height + offsets
    rows, cols = lmap.grid.shape
    out = np.zeros((n, n))
    for a, y in enumerate(py):
        if not 0.0 <= y < height:
            continue
        r = min(int(y // cell), rows - 1)
        for b, x in enumerate(px):
            if 0.0 <= x < width:
                out[a, b] = lmap.grid[r, min(int(x // cell), cols - 1)]
    return out
