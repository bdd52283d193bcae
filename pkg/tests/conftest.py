import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def structured_image(h=64, w=64, seed=0):
    """Edges, a smooth ramp and a textured patch; deterministic."""
    r = np.random.default_rng(seed)
    y, x = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.zeros((h, w, 3))
    img[..., 0] = 0.2 + 0.6 * x
    img[..., 1] = 0.3 + 0.4 * (y > 0.5)
    img[..., 2] = 0.5 + 0.3 * np.sin(12 * x) * np.cos(9 * y)
    img[h // 4:h // 2, w // 4:w // 2] = (0.9, 0.1, 0.2)
    a, b = h // 4, w // 4
    img[h - a:, w - b:] += 0.1 * r.standard_normal((a, b, 3))
    return np.clip(img, 0, 1)


@pytest.fixture
def small_image():
    return structured_image(32, 32)


def random_quantized(rng, n=None, width=None, height=None):
    """A valid QuantizedScene with random shape parameters and codes."""
    from sgsplat.quantization import CODEBOOK_STEP, QuantizedScene, RvqCodebook

    n = int(rng.integers(0, 300)) if n is None else n
    width = int(rng.integers(1, 96)) if width is None else width
    height = int(rng.integers(1, 96)) if height is None else height
    lo = int(rng.integers(1, 17))
    hi = int(rng.integers(lo, 17))
    pos_bits = int(rng.integers(1, 17))
    stages = int(rng.integers(1, 4))
    k = 2 ** int(rng.integers(0, 9))
    c = int(rng.choice([1, 3]))
    bits = rng.integers(lo, hi + 1, n)
    # l1 and l3 ranges stay positive so the scenes render like fitted ones
    cov_min = np.float32(rng.uniform([0.3, -3.0, 0.3], [1.0, 1.0, 1.0])).astype(np.float64)
    cov_max = (cov_min + np.float32(rng.uniform(0.01, 5, 3))).astype(np.float32).astype(np.float64)
    book = rng.integers(0, 65536, (stages, k, c)) * CODEBOOK_STEP - 4.0
    return QuantizedScene(
        width, height, pos_bits, (-1.0, 1.0),
        rng.integers(0, 2 ** pos_bits, (n, 2)),
        cov_min, cov_max, bits,
        rng.integers(0, 2 ** bits[:, None], (n, 3)) if n else np.zeros((0, 3), np.int64),
        RvqCodebook(book), rng.integers(0, k, (stages, n)), (lo, hi),
    )


def gradient_check(scene, rng, h=1e-4):
    """Max relative error of every analytic render gradient against central differences."""
    from oracles import central_difference, relative_error
    from sgsplat.splat import render, render_backward

    up = rng.standard_normal((scene.height, scene.width, scene.channels))
    g = render_backward(scene, up)

    def objective(name):
        def f(x):
            s = scene.copy()
            setattr(s, name, x)
            return float(np.sum(render(s) * up))
        return f

    errs = []
    for name, analytic in (("mu", g.d_mu), ("chol", g.d_chol), ("color", g.d_color)):
        fd = central_difference(objective(name), getattr(scene, name), h)
        errs.append(relative_error(analytic, fd).max())
    return max(errs)
