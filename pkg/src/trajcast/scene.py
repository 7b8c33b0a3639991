"""Scenes, trajectories, grid geometry and ground-truth likelihood maps.

Positions are stored scene-normalised: ``x`` in [0, 1] spans the image width
and ``y`` in [0, 1] spans the image height.  Grid operations convert back to
pixels through the image dimensions.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, ParseError


@dataclass(frozen=True)
class GridSpec:
    """Square grid of ``cell_size`` pixel cells laid over an image."""

    cell_size: int

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ContractError(f"cell_size must be positive, got {self.cell_size}")

    def shape(self, height: int, width: int) -> tuple[int, int]:
        g = self.cell_size
        return math.ceil(height / g), math.ceil(width / g)

    def cell_of_pixel(self, px: float, py: float, height: int, width: int) -> tuple[int, int]:
        # half-open [lo, hi) cells; a point on the far image edge belongs to the last cell
        rows, cols = self.shape(height, width)
        r = min(int(math.floor(py / self.cell_size)), rows - 1)
        c = min(int(math.floor(px / self.cell_size)), cols - 1)
        return max(r, 0), max(c, 0)


@dataclass(frozen=True)
class Track:
    subject_id: int
    cls: int
    frames: np.ndarray  # (n,) int, strictly increasing
    positions: np.ndarray  # (n, 2) normalised (x, y)

    def __len__(self) -> int:
        return len(self.frames)

    def at(self, frame: int) -> np.ndarray | None:
        i = np.searchsorted(self.frames, frame)
        if i < len(self.frames) and self.frames[i] == frame:
            return self.positions[i]
        return None


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) floats in [0, 1]
    tracks: dict[int, Track] = field(default_factory=dict)
    frame_stride: int = 1
    num_classes: int = 1
    # generator-side annotations (e.g. synthetic obstacle rectangles); not persisted
    extras: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def to_pixels(self, pos: np.ndarray) -> np.ndarray:
        return np.asarray(pos, dtype=float) * np.array([self.width, self.height], dtype=float)

    def frames(self) -> np.ndarray:
        if not self.tracks:
            return np.zeros(0, dtype=int)
        return np.unique(np.concatenate([t.frames for t in self.tracks.values()]))

    def subjects_of_class(self, cls: int) -> list[Track]:
        return [t for _, t in sorted(self.tracks.items()) if t.cls == cls]


@dataclass
class LikelihoodMap:
    """Per-class grid of step likelihoods in [0, 1]."""

    cls: int
    grid: np.ndarray  # (rows, cols)
    cell_size: int = 0

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 2:
            raise DataError(f"likelihood map must be 2-D, got shape {g.shape}")
        if g.size and (np.any(~np.isfinite(g)) or g.min() < 0.0 or g.max() > 1.0):
            raise DataError("likelihood map values must lie in [0, 1]")
        self.grid = g

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def save(self, path) -> None:
        rows, cols = self.grid.shape
        lines = [f"{rows} {cols} {self.cls}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.grid]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, cell_size: int = 0) -> LikelihoodMap:
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise ParseError("empty likelihood map file", 1)
        try:
            rows, cols, klass = (int(v) for v in lines[0].split())
        except ValueError as exc:
            raise ParseError(f"bad header {lines[0]!r}", 1) from exc
        if len(lines) - 1 != rows:
            raise ParseError(f"expected {rows} rows, found {len(lines) - 1}")
        grid = np.zeros((rows, cols))
        for i, ln in enumerate(lines[1:]):
            vals = ln.split()
            if len(vals) != cols:
                raise ParseError(f"expected {cols} values", i + 2)
            try:
                grid[i] = [float(v) for v in vals]
            except ValueError as exc:
                raise ParseError(str(exc), i + 2) from exc
        return cls(cls=klass, grid=grid, cell_size=cell_size)


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _tracks_from_rows(rows, width: int, height: int) -> dict[int, Track]:
    per_subject: dict[int, list[tuple[int, float, float]]] = defaultdict(list)
    classes: dict[int, int] = {}
    seen: set[tuple[int, int]] = set()
    for lineno, frame, sid, cls, x, y in rows:
        if (frame, sid) in seen:
            raise DataError(f"line {lineno}: duplicate entry for frame {frame}, subject {sid}")
        seen.add((frame, sid))
        if not (0.0 <= x <= width and 0.0 <= y <= height):
            raise DataError(
                f"line {lineno}: position ({x}, {y}) outside image {width}x{height}"
            )
        if classes.setdefault(sid, cls) != cls:
            raise DataError(f"line {lineno}: subject {sid} changes class {classes[sid]} -> {cls}")
        per_subject[sid].append((frame, x / width, y / height))
    tracks = {}
    for sid in sorted(per_subject):
        pts = sorted(per_subject[sid])
        frames = np.array([p[0] for p in pts], dtype=np.int64)
        pos = np.array([[p[1], p[2]] for p in pts], dtype=np.float64)
        tracks[sid] = Track(sid, classes[sid], frames, pos)
    return tracks


def parse_annotations(
    path, width: int, height: int, image: np.ndarray | None = None, num_classes: int | None = None
) -> Scene:
    """Read a ``frame subject_id class_id x y`` annotation file (pixel coordinates).

    Blank lines and lines starting with ``#`` are skipped.  Rows may appear in
    any order; each subject's points are sorted by frame.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split("\t") if "\t" in s else s.split()
            if len(parts) != 5:
                raise ParseError(f"expected 5 fields, got {len(parts)}", lineno)
            try:
                frame, sid, cls = int(parts[0]), int(parts[1]), int(parts[2])
                x, y = float(parts[3]), float(parts[4])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
            if frame < 0 or sid < 0 or cls < 0:
                raise ParseError("frame, subject and class ids must be non-negative", lineno)
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ParseError("non-finite coordinate", lineno)
            rows.append((lineno, frame, sid, cls, x, y))
    tracks = _tracks_from_rows(rows, width, height)
    max_cls = max((t.cls for t in tracks.values()), default=0)
    if num_classes is None:
        num_classes = max_cls + 1
    elif max_cls >= num_classes:
        raise DataError(f"class id {max_cls} not below configured class count {num_classes}")
    if image is None:
        image = np.zeros((height, width, 3))
    elif image.shape[:2] != (height, width):
        raise DataError(f"image shape {image.shape[:2]} != annotated size {(height, width)}")
    return Scene(image=image, tracks=tracks, num_classes=num_classes)


def format_annotations(scene: Scene) -> str:
    lines = []
    for sid, t in sorted(scene.tracks.items()):
        px = scene.to_pixels(t.positions)
        for f, (x, y) in zip(t.frames, px):
            lines.append(f"{int(f)}\t{int(sid)}\t{int(t.cls)}\t{float(x)!r}\t{float(y)!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png(image: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def save_scene(scene: Scene, directory) -> None:
    """Write ``annotations.tsv``, ``image.png`` and ``scene.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "annotations.tsv").write_text(format_annotations(scene), encoding="utf-8")
    write_png(scene.image, d / "image.png")
    meta = {
        "frame_stride": scene.frame_stride,
        "height": scene.height,
        "num_classes": scene.num_classes,
        "width": scene.width,
    }
    (d / "scene.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def scene_fingerprint(scene: Scene) -> str:
    """Content hash of a scene's annotations and image, independent of where it came from."""
    h = hashlib.sha256()
    h.update(format_annotations(scene).encode("utf-8"))
    h.update(np.ascontiguousarray(scene.image, dtype="<f8").tobytes())
    h.update(f"{scene.image.shape}|{scene.frame_stride}|{scene.num_classes}".encode())
    return h.hexdigest()


def load_scene(directory) -> Scene:
    d = Path(directory)
    if not (d / "annotations.tsv").exists():
        raise DataError(f"{d}: missing annotations.tsv")
    meta = {}
    if (d / "scene.json").exists():
        meta = json.loads((d / "scene.json").read_text(encoding="utf-8"))
    if (d / "image.png").exists():
        image = read_png(d / "image.png")
    elif "width" in meta and "height" in meta:
        image = np.zeros((meta["height"], meta["width"], 3))
    else:
        raise DataError(f"{d}: need image.png or width/height in scene.json")
    scene = parse_annotations(
        d / "annotations.tsv", image.shape[1], image.shape[0], image, meta.get("num_classes")
    )
    scene.frame_stride = int(meta.get("frame_stride", 1))
    return scene


# ---------------------------------------------------------------------------
# Transformations
# ---------------------------------------------------------------------------


def subsample(scene: Scene, stride: int = 10) -> Scene:
    """Keep frames divisible by ``stride`` and renumber them ``frame // stride``.

    Tracks with no retained frame are dropped.
    """
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if stride == 1:
        return replace(scene, tracks=dict(scene.tracks))
    tracks = {}
    for sid, t in scene.tracks.items():
        keep = t.frames % stride == 0
        if not keep.any():
            continue
        tracks[sid] = Track(sid, t.cls, t.frames[keep] // stride, t.positions[keep])
    return replace(scene, tracks=tracks, frame_stride=scene.frame_stride * stride)


def build_ground_truth_map(scene: Scene, cls: int, grid: GridSpec) -> LikelihoodMap:
    """Fraction of unique class-``cls`` subjects that ever occupy each cell."""
    subjects = scene.subjects_of_class(cls)
    if not subjects:
        raise DataError(f"scene has no subjects of class {cls}")
    rows, cols = grid.shape(scene.height, scene.width)
    counts = np.zeros((rows, cols))
    for t in subjects:
        visited = np.zeros((rows, cols), dtype=bool)
        for px, py in scene.to_pixels(t.positions):
            visited[grid.cell_of_pixel(px, py, scene.height, scene.width)] = True
        counts += visited
    return LikelihoodMap(cls=cls, grid=counts / len(subjects), cell_size=grid.cell_size)


def extract_patch(image: np.ndarray, cell: tuple[int, int], grid: GridSpec) -> np.ndarray:
    """The cell plus a ``cell_size`` annulus: a ``3g x 3g`` raster, zero outside the image."""
    g = grid.cell_size
    h, w = image.shape[:2]
    rows, cols = grid.shape(h, w)
    r, c = cell
    if not (0 <= r < rows and 0 <= c < cols):
        raise ContractError(f"cell {cell} outside grid {rows}x{cols}")
    pad = [(g, rows * g - h + g), (g, cols * g - w + g)] + [(0, 0)] * (image.ndim - 2)
    padded = np.pad(image, pad)
    return padded[r * g : r * g + 3 * g, c * g : c * g + 3 * g].copy()


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(raster: np.ndarray, size) -> np.ndarray:
    """Bilinear resize with half-pixel centres to ``size`` (int or ``(h, w)``)."""
    dh, dw = (size, size) if isinstance(size, int) else size
    if dh < 1 or dw < 1:
        raise ContractError(f"target size must be >= 1, got {size}")
    a = np.asarray(raster, dtype=np.float64)
    h, w = a.shape[:2]
    if (h, w) == (dh, dw):
        return a.copy()
    r0, r1, wr = _bilinear_axis(h, dh)
    c0, c1, wc = _bilinear_axis(w, dw)
    wr = wr.reshape((-1,) + (1,) * (a.ndim - 1))
    top = a[r0] * (1.0 - wr) + a[r1] * wr
    wc = wc.reshape((1, -1) + (1,) * (a.ndim - 2))
    return top[:, c0] * (1.0 - wc) + top[:, c1] * wc
