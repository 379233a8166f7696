"""Procedural toy faces for tests, smoke runs and landmark-free demos.

Each frame is a cartoon head on a textured background.  Appearance (shirt,
background, hair colour) is fixed per session; head position, eye openness,
gaze and mouth vary per frame.  Eyes sit where SyntheticLandmarkProvider
expects them.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imaging import ImageTensor, save_image


def _blend(canvas, alpha, colour):
    canvas *= 1.0 - alpha[None]
    canvas += alpha[None] * np.asarray(colour, np.float64)[:, None, None]


def _ellipse(xx, yy, cx, cy, rx, ry, soft):
    d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    return 1.0 / (1.0 + np.exp(np.minimum((d - 1.0) / soft, 50.0)))


def toy_face(size: int, frame: int, appearance: int = 0, seed: int = 0) -> ImageTensor:
    """Signed-range 3 x size x size toy face."""
    look = np.random.default_rng([seed, appearance])
    rng = np.random.default_rng([seed, appearance, frame])
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    soft = 1.5 / size * 4

    bg_a, bg_b = look.uniform(0.1, 0.9, 3), look.uniform(0.1, 0.9, 3)
    freq = look.uniform(6, 14)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx + 0.3 * yy))
    img = bg_a[:, None, None] * stripes + bg_b[:, None, None] * (1 - stripes)

    dx, dy = rng.uniform(-0.03, 0.03, 2)
    cx, cy = 0.5 + dx, 0.5 + dy
    skin = np.array([0.85, 0.65, 0.5]) * look.uniform(0.8, 1.1)
    _blend(img, _ellipse(xx, yy, cx, 1.02, 0.42, 0.2, soft), look.uniform(0.0, 1.0, 3))  # shirt
    _blend(img, _ellipse(xx, yy, cx, cy - 0.08, 0.3, 0.3, soft), look.uniform(0.0, 0.4, 3))  # hair
    _blend(img, _ellipse(xx, yy, cx, cy + 0.04, 0.26, 0.34, soft), skin)

    openness = rng.uniform(0.3, 1.0)
    gx, gy = rng.uniform(-0.02, 0.02, 2)
    for side in (-1, 1):
        ex, ey = cx + side * 0.15, cy - 0.10
        _blend(img, _ellipse(xx, yy, ex, ey, 0.08, 0.045 * openness + 1e-3, soft), (0.97, 0.97, 0.97))
        iris = _ellipse(xx, yy, ex + gx, ey + gy, 0.03, 0.03, soft)
        _blend(img, iris * _ellipse(xx, yy, ex, ey, 0.08, 0.045 * openness + 1e-3, soft), (0.15, 0.25, 0.45))
        _blend(img, _ellipse(xx, yy, ex, ey - 0.07, 0.08, 0.012, soft), (0.2, 0.12, 0.08))  # brow

    _blend(img, _ellipse(xx, yy, cx, cy + 0.08, 0.03, 0.06, soft), skin * 0.85)  # nose
    mouth = rng.uniform(0.2, 1.0)
    _blend(img, _ellipse(xx, yy, cx, cy + 0.22, 0.09, 0.03 * mouth + 0.005, soft), (0.6, 0.1, 0.15))

    data = np.clip(img, 0.0, 1.0) * 2.0 - 1.0
    return ImageTensor(data.astype(np.float32), "signed")


def write_toy_session(out_dir: str | Path, n_frames: int, size: int, appearance: int = 0, seed: int = 0) -> Path:
    """Raw frame directory (frame_0000.png, ...) as a capture tool would leave it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(n_frames):
        save_image(toy_face(size, i, appearance, seed), out / f"frame_{i:04d}.png")
    return out
