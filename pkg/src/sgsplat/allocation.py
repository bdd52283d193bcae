"""Structure-guided placement of the initial Gaussian budget."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation
from .imagery import as_image, sobel, to_grayscale
from .segmentation import SegmentationMap, default_region_count, region_variances, slic_segment
from .splat import GaussianScene, render


@dataclass(frozen=True)
class AllocationConfig:
    """Tier ratios, their schedule, and the resolution-dependent threshold law.

    ``phi`` is normalized on construction, so ``(6, 2, 1)`` is accepted.
    """

    phi: tuple[float, float, float] = (6.0, 2.0, 1.0)
    gamma: float = 10.0
    n0: int = 10_000
    threshold_k: float = 0.6445
    threshold_alpha: float = 0.9
    within: str = "region"

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64)
        if phi.shape != (3,) or np.any(phi <= 0):
            raise ContractViolation("phi must be three positive numbers")
        phi = phi / phi.sum()
        if not (phi[0] >= phi[1] >= phi[2]):
            raise ContractViolation("phi must be non-increasing")
        object.__setattr__(self, "phi", tuple(float(p) for p in phi))
        if not 0 < self.threshold_alpha < 1:
            raise ContractViolation("threshold_alpha must lie in (0, 1)")
        if self.threshold_k <= 0 or self.gamma <= 0 or self.n0 < 0:
            raise ContractViolation("threshold_k, gamma must be > 0 and n0 >= 0")
        if self.within not in ("region", "area"):
            raise ContractViolation("within must be 'region' or 'area'")


def threshold_count(width: int, height: int, cfg: AllocationConfig = AllocationConfig()) -> int:
    """Budget above which tiers are fully uniform: ``round(k * (H W) ** alpha)``."""
    return int(round(cfg.threshold_k * (width * height) ** cfg.threshold_alpha))


def dynamic_ratios(n: int, n_t: int, cfg: AllocationConfig = AllocationConfig()) -> tuple[float, float, float]:
    if n_t <= cfg.n0:
        raise ContractViolation(f"threshold {n_t} must exceed n0={cfg.n0}")
    t = min(max((n - cfg.n0) / (n_t - cfg.n0), 0.0), 1.0)
    s = t ** cfg.gamma
    # written as a shift from phi so rounding keeps each component monotone in n
    return tuple(p + s * (1.0 / 3.0 - p) for p in cfg.phi)


def split_categories(region_count: int) -> tuple[int, int, int]:
    """Near-equal tier sizes over the ranked region list."""
    a = -(-region_count // 3)
    b = -(-(region_count - a) // 2)
    return a, b, region_count - a - b


def region_budgets(ranked, n: int, ratios, sizes=None, within="region") -> np.ndarray:
    """Gaussian count per ranked region (same order as ``ranked``).

    Each tier gets ``floor(n * phi_i)``. Within a tier the count is split
    evenly (earlier-ranked regions take the extras) or, with
    ``within="area"``, in proportion to region area by largest remainder.
    Points lost to flooring go one at a time to the most complex regions.
    """
    r = len(ranked)
    if r < 3:
        raise ContractViolation("need at least 3 regions to form three tiers")
    if n < 0:
        raise ContractViolation("n must be non-negative")
    tiers = split_categories(r)
    out = np.zeros(r, dtype=np.int64)
    start = 0
    for size, phi in zip(tiers, ratios):
        budget = int(math.floor(n * phi + 1e-9))
        if size:
            if within == "area" and sizes is not None:
                area = np.array([sizes[rid] for rid, _ in ranked[start:start + size]], dtype=np.float64)
                share = budget * area / area.sum()
                alloc = np.floor(share).astype(np.int64)
                rest = budget - alloc.sum()
                order = np.lexsort((np.arange(size), -(share - alloc)))
                alloc[order[:rest]] += 1
            else:
                alloc = np.full(size, budget // size, dtype=np.int64)
                alloc[: budget % size] += 1
            out[start:start + size] = alloc
        start += size
    leftover = n - int(out.sum())
    for j in range(leftover):
        out[j % r] += 1
    return out


def allocate_positions(seg: SegmentationMap, ranked, n: int, ratios, seed: int = 0, within="region"):
    """Sample ``n`` pixel-space positions ``(x, y)`` according to the tier budgets.

    Each region draws from its own random stream seeded by
    ``(seed, region_id)``; pixels are sampled without replacement while the
    region has enough of them, and every point is jittered inside its pixel.

    Returns:
        positions ``(n, 2)`` and the region id of each position.
    """
    sizes = seg.sizes()
    budgets = region_budgets(ranked, n, ratios, sizes, within)
    width = seg.shape[1]
    pos = []
    owner = []
    for (rid, _), count in zip(ranked, budgets):
        if count == 0:
            continue
        rng = np.random.default_rng([int(seed), int(rid)])
        pix = seg.region_pixels(rid)
        pick = rng.choice(pix.size, size=count, replace=count > pix.size)
        flat = pix[pick]
        jitter = rng.uniform(0.0, 1.0, size=(count, 2))
        xy = np.column_stack([flat % width, flat // width]) + jitter
        pos.append(xy)
        owner.append(np.full(count, rid))
    if not pos:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    return np.concatenate(pos), np.concatenate(owner)


def bilinear_sample(img: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Sample ``img`` at continuous pixel-space points; pixel centers sit at ``i + 0.5``."""
    h, w = img.shape[:2]
    x = np.clip(xy[:, 0] - 0.5, 0.0, w - 1.0)
    y = np.clip(xy[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def init_scene(img, positions, init_scale) -> GaussianScene:
    """Isotropic Gaussians at ``positions`` colored from the image.

    Colors are divided by ``max(1, overlap)`` where ``overlap`` is the
    summed unit-color kernel response at the Gaussian's own center, so the
    initial accumulated render is not over-bright.
    """
    img = as_image(img)
    h, w, c = img.shape
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    n = positions.shape[0]
    if n == 0:
        return GaussianScene.empty(w, h, c)
    if np.any(positions < 0) or np.any(positions[:, 0] > w) or np.any(positions[:, 1] > h):
        raise ContractViolation("positions must lie inside the image")
    scale = np.broadcast_to(np.asarray(init_scale, dtype=np.float64), (n,))
    mu = positions / np.array([w, h]) * 2.0 - 1.0
    chol = np.column_stack([scale, np.zeros(n), scale])
    unit = GaussianScene(mu, chol, np.ones((n, 1)), w, h)
    coverage = bilinear_sample(render(unit), positions)[:, 0]
    color = bilinear_sample(img, positions) / np.maximum(1.0, coverage)[:, None]
    return GaussianScene(mu, chol, color, w, h)


def structure_guided_init(img, n: int, cfg: AllocationConfig = AllocationConfig(), *,
                          target_regions=None, compactness=10.0, slic_iterations=10, seed=0,
                          scale_factor=0.5):
    """Full structure-guided initialization.

    Returns the scene plus a dict with the segmentation, ranking, ratios and
    per-region budgets for inspection.
    """
    img = as_image(img)
    h, w = img.shape[:2]
    gray = to_grayscale(img)
    grad = sobel(gray)
    if target_regions is None:
        target_regions = default_region_count(h, w)
    seg = slic_segment(img, target_regions, compactness, slic_iterations, seed)
    ranked = region_variances(seg, grad)
    n_t = threshold_count(w, h, cfg)
    ratios = dynamic_ratios(n, n_t, cfg) if n_t > cfg.n0 else (1 / 3, 1 / 3, 1 / 3)
    positions, owner = allocate_positions(seg, ranked, n, ratios, seed, cfg.within)
    # kernel width follows local point density: half the mean spacing in the region
    sizes = seg.sizes()
    per_region = np.bincount(owner, minlength=seg.region_count)
    spacing = np.sqrt(sizes[owner] / np.maximum(per_region[owner], 1))
    grid_step = math.sqrt(h * w / target_regions)
    scale = np.clip(scale_factor * spacing, 0.5, 0.5 * grid_step)
    scene = init_scene(img, positions, scale)
    info = dict(segmentation=seg, ranked=ranked, ratios=ratios, threshold=n_t,
                budgets=region_budgets(ranked, n, ratios, sizes, cfg.within))
    return scene, info


def random_init(img, n: int, seed=0, scale_factor=0.5) -> GaussianScene:
    """Uniformly random positions with one global kernel width (ablation baseline)."""
    img = as_image(img)
    h, w = img.shape[:2]
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, 1.0, size=(n, 2)) * np.array([w, h])
    scale = max(0.5, scale_factor * math.sqrt(h * w / max(n, 1)))
    return init_scene(img, positions, scale)
