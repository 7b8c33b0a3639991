"""Seeded synthetic scenes used as desk-scale fixtures.

Three generator kinds are available through :func:`generate_synth`:

``constant-velocity``
    straight lines with Gaussian position noise, released in groups so that
    group members share an observation window.
``crossing-groups``
    two cohorts per group, one heading east and one heading south, meeting
    near a common crossing point.
``obstacle-field``
    eastbound walkers that sidestep textured rectangular no-go zones.  The
    image encodes the zones so a scene CNN has something to learn from.

Trajectories are emitted on raw frame numbers ``step * frame_step`` so the
usual ``subsample(scene, frame_step)`` preprocessing applies.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError
from .scene import Scene, Track

KINDS = ("constant-velocity", "crossing-groups", "obstacle-field")


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "constant-velocity"
    n_trajectories: int = 300
    group_size: int = 10
    length: int = 20
    noise: float = 0.01
    seed: int = 0
    width: int = 240
    height: int = 240
    frame_step: int = 10
    speed_min: float = 0.01
    speed_max: float = 0.02
    cell_size: int = 20
    n_obstacles: int = 3
    detour_fraction: float = 0.6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown generator kind {self.kind!r}; choose from {KINDS}")
        if self.n_trajectories < 0 or self.group_size < 1 or self.length < 1:
            raise ContractError("counts must be positive")
        if self.noise < 0:
            raise ContractError("noise must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle ``[x0, x1) x [y0, y1)``."""

    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, px, py, margin: float = 0.0):
        px = np.asarray(px)
        py = np.asarray(py)
        return (
            (px >= self.x0 - margin) & (px < self.x1 + margin)
            & (py >= self.y0 - margin) & (py < self.y1 + margin)
        )


# ---------------------------------------------------------------------------
# Textures
# ---------------------------------------------------------------------------

FREE_RGB = np.array([0.78, 0.76, 0.70])
BLOCKED_RGB = np.array([0.18, 0.34, 0.16])


def _textured_image(rng, height, width, blocked: np.ndarray) -> np.ndarray:
    """Smooth light ground where ``blocked`` is False, dark checker where True."""
    yy, xx = np.mgrid[0:height, 0:width]
    checker = (((yy // 4) + (xx // 4)) % 2).astype(float)
    img = np.empty((height, width, 3))
    free = FREE_RGB + rng.normal(0.0, 0.03, size=(height, width, 3))
    dark = BLOCKED_RGB + 0.12 * checker[..., None] + rng.normal(0.0, 0.03, size=(height, width, 3))
    img[:] = np.where(blocked[..., None], dark, free)
    # quantise to 8 bits so PNG round-trips are exact
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _finish(rng, spec: SynthSpec, paths: list[tuple[int, np.ndarray]], image) -> Scene:
    tracks = {}
    for sid, (start, pix) in enumerate(paths):
        pos = pix / np.array([spec.width, spec.height], dtype=float)
        frames = (start + np.arange(len(pos))) * spec.frame_step
        tracks[sid] = Track(sid, 0, frames.astype(np.int64), pos)
    return Scene(image=image, tracks=tracks, frame_stride=1, num_classes=1)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def _constant_velocity(spec: SynthSpec, rng) -> Scene:
    L = spec.length
    paths = []
    for i in range(spec.n_trajectories):
        group = i // spec.group_size
        while True:
            speed = rng.uniform(spec.speed_min, spec.speed_max)
            heading = rng.uniform(0.0, 2.0 * np.pi)
            v = speed * np.array([np.cos(heading), np.sin(heading)])
            start = rng.uniform(0.05, 0.95, size=2)
            end = start + (L - 1) * v
            if np.all((end > 0.05) & (end < 0.95)):
                break
        pos = start + np.arange(L)[:, None] * v
        pos = np.clip(pos + rng.normal(0.0, spec.noise, size=pos.shape), 0.0, 1.0)
        paths.append((group * L, pos * np.array([spec.width, spec.height])))
    image = _textured_image(rng, spec.height, spec.width, np.zeros((spec.height, spec.width), bool))
    return _finish(rng, spec, paths, image)


def _crossing_groups(spec: SynthSpec, rng) -> Scene:
    L = spec.length
    paths = []
    for i in range(spec.n_trajectories):
        group = i // spec.group_size
        rng_g = np.random.default_rng([spec.seed, group])
        cross = rng_g.uniform(0.35, 0.65, size=2)
        speed = rng.uniform(spec.speed_min, spec.speed_max)
        eastbound = (i % spec.group_size) % 2 == 0
        direction = np.array([1.0, 0.0]) if eastbound else np.array([0.0, 1.0])
        lateral = np.array([0.0, 1.0]) if eastbound else np.array([1.0, 0.0])
        offset = rng.normal(0.0, 0.03)
        # reach the crossing point around the middle of the track
        t_cross = rng.uniform(0.4, 0.6) * (L - 1)
        start = cross - t_cross * speed * direction + offset * lateral
        pos = start + np.arange(L)[:, None] * speed * direction
        pos = np.clip(pos + rng.normal(0.0, spec.noise, size=pos.shape), 0.0, 1.0)
        paths.append((group * L, pos * np.array([spec.width, spec.height])))
    image = _textured_image(rng, spec.height, spec.width, np.zeros((spec.height, spec.width), bool))
    return _finish(rng, spec, paths, image)


def _place_obstacles(spec: SynthSpec, rng) -> list[Rect]:
    g = spec.cell_size
    cols, rows = spec.width // g, spec.height // g
    rects: list[Rect] = []
    tries = 0
    while len(rects) < spec.n_obstacles and tries < 1000:
        tries += 1
        w = int(rng.integers(2, 4)) * g
        h = int(rng.integers(2, 5)) * g
        x0 = int(rng.integers(cols // 3, cols - w // g - 1)) * g
        y0 = int(rng.integers(1, rows - h // g - 1)) * g
        cand = Rect(x0, y0, x0 + w, y0 + h)
        # keep a free corridor of at least two cells between zones
        if any(
            cand.x0 < r.x1 + 2 * g and r.x0 < cand.x1 + 2 * g
            and cand.y0 < r.y1 + 2 * g and r.y0 < cand.y1 + 2 * g
            for r in rects
        ):
            continue
        rects.append(cand)
    return rects


def walk_with_detours(
    start: np.ndarray, vx: float, steps: int, rects: list[Rect], lookahead: float, margin: float
) -> np.ndarray:
    """Eastbound walk that sidesteps rectangles, turning toward the nearer free edge."""
    x, y = float(start[0]), float(start[1])
    out = np.empty((steps, 2))
    for i in range(steps):
        out[i] = x, y
        blocker = None
        for r in rects:
            if r.y0 - margin <= y < r.y1 + margin and r.x0 - margin - lookahead <= x < r.x1 + margin:
                blocker = r
                break
        if blocker is None:
            x += vx
        else:
            up = (y - blocker.y0) < (blocker.y1 - y)
            y += -vx if up else vx
            x += 0.25 * vx
    return out


def _obstacle_field(spec: SynthSpec, rng, t_obs: int = 8) -> Scene:
    L = spec.length
    W, H = spec.width, spec.height
    rects = _place_obstacles(spec, rng)
    yy, xx = np.mgrid[0:H, 0:W]
    blocked = np.zeros((H, W), bool)
    for r in rects:
        blocked |= r.contains(xx + 0.5, yy + 0.5)
    image = _textured_image(rng, H, W, blocked)

    vx = 0.5 * (spec.speed_min + spec.speed_max) * W
    margin = 0.3 * spec.cell_size
    lookahead = spec.cell_size
    noise_px = spec.noise * np.array([W, H])
    paths = []
    i = 0
    attempts = 0
    while i < spec.n_trajectories and attempts < 100 * max(spec.n_trajectories, 1):
        attempts += 1
        group = i // spec.group_size
        if rects and rng.random() < spec.detour_fraction:
            r = rects[int(rng.integers(len(rects)))]
            y = rng.uniform(r.y0 + 1.0, r.y1 - 1.0)
            first_blocked = t_obs + int(rng.integers(-1, 3))
            x = r.x0 - margin - lookahead - (first_blocked - 0.5) * vx
        else:
            y = rng.uniform(0.05 * H, 0.95 * H)
            x = rng.uniform(0.02 * W, W - L * vx - 0.02 * W)
        if x < 1.0:
            continue
        pix = walk_with_detours(np.array([x, y]), vx, L, rects, lookahead, margin)
        pix = pix + rng.normal(0.0, 1.0, size=pix.shape) * noise_px
        inside_image = np.all((pix >= 0) & (pix <= np.array([W, H])))
        hits = any(r.contains(pix[:, 0], pix[:, 1]).any() for r in rects)
        if not inside_image or hits:
            continue
        paths.append((group * L, pix))
        i += 1
    scene = _finish(rng, spec, paths, image)
    scene.extras["obstacles"] = rects
    return scene


def generate_synth(spec: SynthSpec) -> Scene:
    """Build a scene from ``spec``; identical specs give identical scenes."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "constant-velocity":
        return _constant_velocity(spec, rng)
    if spec.kind == "crossing-groups":
        return _crossing_groups(spec, rng)
    return _obstacle_field(spec, rng)


def obstacle_rects(scene: Scene) -> list[Rect]:
    return list(scene.extras.get("obstacles", []))


def rects_from_image(image: np.ndarray) -> np.ndarray:
    """Boolean mask of pixels carrying the blocked texture."""
    return np.linalg.norm(image - FREE_RGB, axis=-1) > np.linalg.norm(image - BLOCKED_RGB - 0.06, axis=-1)


def ring_road_scene(seed: int, size: int = 160, cell: int = 20, n_walkers: int = 10) -> Scene:
    """Two-texture scene: a one-cell-wide rectangular ring road every walker loops once.

    Ring cells have ground-truth likelihood 1 and all other cells 0.
    """
    rng = np.random.default_rng(seed)
    n = size // cell
    r0, c0 = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    r1, c1 = int(rng.integers(n - 3, n - 1)), int(rng.integers(n - 3, n - 1))
    corners = [(c0, r0), (c1, r0), (c1, r1), (c0, r1), (c0, r0)]
    loop = []
    for (ca, ra), (cb, rb) in zip(corners[:-1], corners[1:]):
        k = max(abs(cb - ca), abs(rb - ra))
        for j in range(k):
            loop.append((ca + (cb - ca) * j / k, ra + (rb - ra) * j / k))
    loop = (np.array(loop) + 0.5) * cell
    road = np.zeros((n, n), bool)
    road[r0, c0 : c1 + 1] = road[r1, c0 : c1 + 1] = True
    road[r0 : r1 + 1, c0] = road[r0 : r1 + 1, c1] = True
    blocked = ~np.kron(road, np.ones((cell, cell), bool))
    image = _textured_image(rng, size, size, blocked)
    tracks = {}
    for sid in range(n_walkers):
        shift = int(rng.integers(len(loop)))
        pix = np.roll(loop, -shift, axis=0)
        pix = np.vstack([pix, pix[:1]]) + rng.uniform(-0.2, 0.2, size=(len(pix) + 1, 2)) * cell
        frames = (sid * 2 + np.arange(len(pix))).astype(np.int64)
        tracks[sid] = Track(sid, 0, frames, pix / size)
    scene = Scene(image=image, tracks=tracks, frame_stride=1, num_classes=1)
    scene.extras["road"] = road
    return scene
