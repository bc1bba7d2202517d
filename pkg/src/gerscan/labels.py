"""Training-data creation: footprint rasterization and synthetic scenes.

Masks use pixel-center membership with the even-odd fill rule; footprints in
WGS84 are projected into tile pixel space linearly in mercator coordinates.
The synthetic generator draws ger-like bright discs with known centers so the
whole pipeline can be verified against exact ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tiles import GeoPoint, TileCoord, pixel_of

TILE_PX = 256
# radius giving ~61 m^2 of roof at the 0.40 m/px zoom-18 scale
CANONICAL_GER_RADIUS_PX = 11.0
CONFUSER_RADIUS_FACTOR = 1.6


class LabelError(ValueError):
    pass


class PlacementError(RuntimeError):
    """Raised when random placement cannot satisfy the density constraints."""


@dataclass(frozen=True)
class Footprint:
    id: str
    ring: tuple[GeoPoint, ...]
    period: str = ""

    def __post_init__(self) -> None:
        ring = tuple(self.ring)
        if len(ring) >= 2 and ring[0] == ring[-1]:
            ring = ring[:-1]  # store open; closure is implicit
        if len(ring) < 3:
            raise LabelError(f"footprint {self.id}: ring needs at least 3 distinct vertices")
        object.__setattr__(self, "ring", ring)
        if _self_intersects([(p.lon, p.lat) for p in ring]):
            raise LabelError(f"footprint {self.id}: ring is self-intersecting")


def _orient(ax: float, ay: float, bx: float, by: float, cx: float, cy: float) -> float:
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _segments_cross(p1, p2, p3, p4) -> bool:
    d1 = _orient(*p3, *p4, *p1)
    d2 = _orient(*p3, *p4, *p2)
    d3 = _orient(*p1, *p2, *p3)
    d4 = _orient(*p1, *p2, *p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0


def _self_intersects(pts: list[tuple[float, float]]) -> bool:
    n = len(pts)
    for i in range(n):
        a1, a2 = pts[i], pts[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # adjacent edges share a vertex
            b1, b2 = pts[j], pts[(j + 1) % n]
            if _segments_cross(a1, a2, b1, b2):
                return True
    return False


@dataclass
class LabeledTile:
    coord: TileCoord
    image: np.ndarray  # (256, 256, 3) uint8
    mask: np.ndarray  # (256, 256) uint8 in {0, 1}
    period: str = ""

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image, dtype=np.uint8)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.shape != (TILE_PX, TILE_PX, 3):
            raise LabelError(f"image must be {TILE_PX}x{TILE_PX}x3, got {self.image.shape}")
        if self.mask.shape != (TILE_PX, TILE_PX):
            raise LabelError(f"mask must be {TILE_PX}x{TILE_PX}, got {self.mask.shape}")
        bad = set(np.unique(self.mask)) - {0, 1}
        if bad:
            raise LabelError(f"mask values outside {{0,1}}: {sorted(bad)}")

    @property
    def positive_pixels(self) -> int:
        return int(self.mask.sum())


def fill_polygon_px(mask: np.ndarray, vertices: list[tuple[float, float]]) -> None:
    """Even-odd scanline fill of a polygon given in (col, row) pixel coordinates.

    A pixel is set when its center (col+0.5, row+0.5) is inside. Edits mask
    in place (logical OR with the polygon's interior).
    """
    h, w = mask.shape
    xs = np.array([v[0] for v in vertices], dtype=np.float64)
    ys = np.array([v[1] for v in vertices], dtype=np.float64)
    row_lo = max(0, int(math.floor(ys.min() - 0.5)))
    row_hi = min(h - 1, int(math.ceil(ys.max())))
    x2 = np.roll(xs, -1)
    y2 = np.roll(ys, -1)
    for row in range(row_lo, row_hi + 1):
        yc = row + 0.5
        # half-open rule: an edge crosses when min(y) <= yc < max(y)
        lo = np.minimum(ys, y2)
        hi = np.maximum(ys, y2)
        active = (lo <= yc) & (yc < hi)
        if not active.any():
            continue
        t = (yc - ys[active]) / (y2[active] - ys[active])
        crossings = np.sort(xs[active] + t * (x2[active] - xs[active]))
        for i in range(0, len(crossings) - 1, 2):
            c0 = int(math.ceil(crossings[i] - 0.5))
            c1 = int(math.ceil(crossings[i + 1] - 0.5))
            if c1 > 0 and c0 < w:
                mask[row, max(c0, 0) : min(c1, w)] = 1


def rasterize(footprints: list[Footprint], t: TileCoord) -> np.ndarray:
    """Binary 256x256 mask: 1 where any footprint covers the pixel center."""
    mask = np.zeros((TILE_PX, TILE_PX), dtype=np.uint8)
    for fp in footprints:
        vertices = [pixel_of(p, t) for p in fp.ring]
        fill_polygon_px(mask, vertices)
    return mask


@dataclass(frozen=True)
class Circle:
    """Ground-truth disc in tile pixel coordinates."""

    cx: float
    cy: float
    radius: float
    is_ger: bool = True


@dataclass
class SyntheticSceneSpec:
    ger_count: int = 10
    ger_radius_px: float = CANONICAL_GER_RADIUS_PX
    confuser_count: int = 0
    noise_level: float = 0.3
    rng_seed: int = 0
    overlap_pairs: int = 0  # ger pairs placed merged (testing blob recounts)
    allow_edge_clipping: bool = False
    min_separation_px: float = 3.0
    coord: TileCoord = field(default_factory=lambda: TileCoord(18, 0, 0))
    period: str = "synthetic"

    def __post_init__(self) -> None:
        if self.ger_count < 0 or self.confuser_count < 0 or self.overlap_pairs < 0:
            raise LabelError("counts must be non-negative")
        if self.ger_radius_px <= 0:
            raise LabelError("ger radius must be positive")
        if not 0.0 <= self.noise_level <= 1.0:
            raise LabelError("noise_level must be within [0, 1]")
        if 2 * self.overlap_pairs > self.ger_count:
            raise LabelError("overlap_pairs gers (2 per pair) cannot exceed ger_count")


def disc_pixels(cx: float, cy: float, radius: float, size: int = TILE_PX) -> np.ndarray:
    """Boolean map of pixels whose centers fall inside the disc."""
    cols = np.arange(size) + 0.5
    rows = np.arange(size) + 0.5
    dx = cols[None, :] - cx
    dy = rows[:, None] - cy
    return dx * dx + dy * dy <= radius * radius


def _place(
    rng: np.random.Generator,
    placed: list[Circle],
    radius: float,
    spec: SyntheticSceneSpec,
    max_tries: int = 1000,
) -> tuple[float, float]:
    margin = 1.0 if spec.allow_edge_clipping else radius + 1.0
    if 2 * margin >= TILE_PX:
        raise PlacementError(f"radius {radius} cannot fit a {TILE_PX}px tile")
    for _ in range(max_tries):
        cx = rng.uniform(margin, TILE_PX - margin)
        cy = rng.uniform(margin, TILE_PX - margin)
        ok = all(
            math.hypot(cx - c.cx, cy - c.cy) >= radius + c.radius + spec.min_separation_px
            for c in placed
        )
        if ok:
            return cx, cy
    raise PlacementError(f"could not place disc of radius {radius} after {max_tries} tries")


def _draw_ger(image: np.ndarray, inside: np.ndarray, cx: float, cy: float, radius: float, rng) -> None:
    rows, cols = np.nonzero(inside)
    dy = rows + 0.5 - cy
    dx = cols + 0.5 - cx
    angle = np.arctan2(dy, dx)
    dist = np.hypot(dx, dy) / max(radius, 1e-9)
    # bright near-white roof with radial ridge texture and a dim rim
    ridges = 12.0 * (0.5 + 0.5 * np.sin(8.0 * angle)) * dist
    base = 238.0 - ridges - 18.0 * dist**4
    jitter = rng.normal(0.0, 3.0, size=base.shape)
    for ch, tint in enumerate((1.0, 0.99, 0.96)):
        image[rows, cols, ch] = np.clip(base * tint + jitter, 0, 255)


def _draw_confuser(image: np.ndarray, inside: np.ndarray, cx: float, cy: float, radius: float, rng) -> None:
    rows, cols = np.nonzero(inside)
    dist = np.hypot(rows + 0.5 - cy, cols + 0.5 - cx) / max(radius, 1e-9)
    base = 232.0 - 10.0 * dist  # smooth dome, no ridges
    for ch, tint in enumerate((0.98, 1.0, 1.0)):
        image[rows, cols, ch] = np.clip(base * tint, 0, 255)


def generate_scene(spec: SyntheticSceneSpec) -> tuple[LabeledTile, list[Circle]]:
    """Deterministic synthetic tile with exact ground truth.

    Gers are bright textured discs labeled 1; confusers are larger smooth
    bright discs labeled 0. The mask equals the union of the drawn ger discs.
    """
    rng = np.random.default_rng(spec.rng_seed)
    background = 90.0 + rng.normal(0.0, 40.0 * spec.noise_level, size=(TILE_PX, TILE_PX))
    image = np.clip(
        background[:, :, None] + rng.normal(0.0, 6.0 * spec.noise_level, size=(TILE_PX, TILE_PX, 3)),
        0,
        255,
    )

    circles: list[Circle] = []
    r = spec.ger_radius_px
    for _ in range(spec.overlap_pairs):
        cx, cy = _place(rng, circles, 2.2 * r, spec)  # reserve room for the pair
        theta = rng.uniform(0, 2 * math.pi)
        gap = rng.uniform(1.0, 1.5) * r
        ax, ay = cx - math.cos(theta) * gap / 2, cy - math.sin(theta) * gap / 2
        bx, by = cx + math.cos(theta) * gap / 2, cy + math.sin(theta) * gap / 2
        circles.append(Circle(ax, ay, r))
        circles.append(Circle(bx, by, r))
    for _ in range(spec.ger_count - 2 * spec.overlap_pairs):
        cx, cy = _place(rng, circles, r, spec)
        circles.append(Circle(cx, cy, r))
    confuser_r = r * CONFUSER_RADIUS_FACTOR
    for _ in range(spec.confuser_count):
        cx, cy = _place(rng, circles, confuser_r, spec)
        circles.append(Circle(cx, cy, confuser_r, is_ger=False))

    mask = np.zeros((TILE_PX, TILE_PX), dtype=np.uint8)
    for c in circles:
        inside = disc_pixels(c.cx, c.cy, c.radius)
        if c.is_ger:
            _draw_ger(image, inside, c.cx, c.cy, c.radius, rng)
            mask[inside] = 1
        else:
            _draw_confuser(image, inside, c.cx, c.cy, c.radius, rng)

    tile = LabeledTile(
        coord=spec.coord,
        image=np.clip(image, 0, 255).astype(np.uint8),
        mask=mask,
        period=spec.period,
    )
    return tile, circles


def generate_dataset(
    base_spec: SyntheticSceneSpec, n_tiles: int, base_seed: int
) -> list[tuple[LabeledTile, list[Circle]]]:
    """n independent scenes with per-tile RNG streams derived from (seed, index)."""
    out = []
    width = int(math.ceil(math.sqrt(max(n_tiles, 1))))
    for i in range(n_tiles):
        spec = SyntheticSceneSpec(
            ger_count=base_spec.ger_count,
            ger_radius_px=base_spec.ger_radius_px,
            confuser_count=base_spec.confuser_count,
            noise_level=base_spec.noise_level,
            rng_seed=int(np.random.SeedSequence([base_seed, i]).generate_state(1)[0]),
            overlap_pairs=base_spec.overlap_pairs,
            allow_edge_clipping=base_spec.allow_edge_clipping,
            min_separation_px=base_spec.min_separation_px,
            coord=TileCoord(18, base_spec.coord.x + i % width, base_spec.coord.y + i // width),
            period=base_spec.period,
        )
        out.append(generate_scene(spec))
    return out


def positive_fraction(tiles: list[LabeledTile]) -> float:
    """Class-imbalance report: fraction of positive pixels across a dataset."""
    if not tiles:
        raise LabelError("no tiles")
    total = sum(t.mask.size for t in tiles)
    return sum(t.positive_pixels for t in tiles) / total


def split_dataset(
    tiles: list, train_fraction: float, rng_seed: int
) -> tuple[list, list]:
    """Deterministic disjoint shuffle-split; train size = floor(n * fraction).

    The floor is clamped so both sides stay non-empty.
    """
    if not 0.0 < train_fraction < 1.0:
        raise LabelError("train_fraction must be in (0, 1)")
    if len(tiles) < 2:
        raise LabelError("need at least 2 tiles to split")
    order = np.random.default_rng(rng_seed).permutation(len(tiles))
    n_train = min(max(int(math.floor(len(tiles) * train_fraction)), 1), len(tiles) - 1)
    train = [tiles[i] for i in order[:n_train]]
    evaluation = [tiles[i] for i in order[n_train:]]
    return train, evaluation
