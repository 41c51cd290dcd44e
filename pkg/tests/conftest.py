import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))


def structured_image(h, w, rgb=True, seed=0):
    """Deterministic test image: smooth ramps plus a few hard rectangles."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = 60 + 80 * yy / max(h - 1, 1) + 70 * xx / max(w - 1, 1)
    img = np.stack([base, np.flipud(base), np.fliplr(base)], axis=-1)
    for _ in range(4):
        i0, j0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
        di, dj = rng.integers(2, max(h // 3, 3)), rng.integers(2, max(w // 3, 3))
        img[i0:i0 + di, j0:j0 + dj] = rng.integers(0, 256, 3)
    img = np.clip(img, 0, 255).astype(np.uint8)
    return img if rgb else img[..., 0]


def random_labels(rng, h, w, num_classes, ignore_frac=0.1):
    labels = rng.integers(0, num_classes, (h, w)).astype(np.uint8)
    labels[rng.random((h, w)) < ignore_frac] = 255
    return labels
