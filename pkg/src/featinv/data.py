"""Procedural desk-scale image corpus.

Images are 3x32x32 float32 in [0, 1]: a two-colour gradient background with
one anti-aliased foreground object. The object kind is the class label and
its name doubles as the caption used for text conditioning. Scenes are
continuous, so frame groups are rendered by translating the scene exactly.
"""

from dataclasses import dataclass

import numpy as np

CLASSES = ("circle", "square", "triangle", "stripes")
IMAGE_SIZE = 32


@dataclass
class Scene:
    label: int
    bg0: np.ndarray
    bg1: np.ndarray
    bg_angle: float
    fg: np.ndarray
    cx: float
    cy: float
    size: float
    rot: float
    freq: float


def _random_scene(rng, label=None):
    if label is None:
        label = int(rng.integers(len(CLASSES)))
    fg = rng.uniform(0.0, 1.0, 3)
    bg0 = rng.uniform(0.0, 1.0, 3)
    # keep foreground/background contrast from collapsing
    bg1 = np.clip(bg0 + rng.uniform(-0.3, 0.3, 3), 0, 1)
    while np.abs(fg - 0.5 * (bg0 + bg1)).max() < 0.35:
        fg = rng.uniform(0.0, 1.0, 3)
    return Scene(
        label=label,
        bg0=bg0,
        bg1=bg1,
        bg_angle=float(rng.uniform(0, 2 * np.pi)),
        fg=fg,
        cx=float(rng.uniform(11, 21)),
        cy=float(rng.uniform(11, 21)),
        size=float(rng.uniform(6, 10)),
        rot=float(rng.uniform(0, 2 * np.pi)),
        freq=float(rng.uniform(0.35, 0.7)),
    )


def _soft(d, sharp=2.0):
    return 1.0 / (1.0 + np.exp(-sharp * d))


def render(scene, dx=0.0, dy=0.0, size=IMAGE_SIZE):
    """Render ``scene`` translated by (dx, dy) pixels. Returns (3, size, size) float32."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    xx = xx - dx
    yy = yy - dy
    c, s = np.cos(scene.bg_angle), np.sin(scene.bg_angle)
    t = ((xx - size / 2) * c + (yy - size / 2) * s) / size + 0.5
    t = np.clip(t, 0, 1)[None]
    bg = scene.bg0[:, None, None] * (1 - t) + scene.bg1[:, None, None] * t

    u = xx - scene.cx
    v = yy - scene.cy
    cr, sr = np.cos(scene.rot), np.sin(scene.rot)
    ur = u * cr + v * sr
    vr = -u * sr + v * cr
    name = CLASSES[scene.label]
    if name == "circle":
        mask = _soft(scene.size - np.hypot(u, v))
    elif name == "square":
        mask = _soft(scene.size * 0.85 - np.maximum(np.abs(ur), np.abs(vr)))
    elif name == "triangle":
        d = np.full_like(ur, np.inf)
        for k in range(3):
            a = scene.rot + k * 2 * np.pi / 3
            d = np.minimum(d, scene.size * 0.6 - (u * np.cos(a) + v * np.sin(a)))
        mask = _soft(d)
    else:
        band = np.sin(2 * np.pi * scene.freq * ur / 2.0)
        mask = _soft(band, sharp=4.0) * _soft(scene.size * 1.3 - np.hypot(u, v))
    img = bg * (1 - mask[None]) + scene.fg[:, None, None] * mask[None]
    return np.clip(img, 0, 1).astype(np.float32)


def make_shapes(n, seed=0):
    """Return ``(images, labels, captions)`` for ``n`` random scenes.

    Labels cycle through the classes so every class is equally represented.
    """
    rng = np.random.default_rng(seed)
    images = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        scene = _random_scene(rng, label=i % len(CLASSES))
        images[i] = render(scene)
        labels[i] = scene.label
    perm = rng.permutation(n)
    images, labels = images[perm], labels[perm]
    captions = [CLASSES[k] for k in labels]
    return images, labels, captions


def make_translated_frames(n_groups, k=4, shift=2.0, seed=0, noise=0.0):
    """Groups of ``k`` frames of one scene, each shifted ``shift`` px further right.

    Returns ``(frames, labels)`` with frames shaped (n_groups, k, 3, 32, 32).
    ``noise`` adds i.i.d. Gaussian pixel noise per frame (clipped to [0, 1]).
    """
    rng = np.random.default_rng(seed)
    frames = np.empty((n_groups, k, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    labels = np.empty(n_groups, dtype=np.int64)
    for g in range(n_groups):
        scene = _random_scene(rng, label=g % len(CLASSES))
        labels[g] = scene.label
        start = -shift * (k - 1) / 2
        for j in range(k):
            frames[g, j] = render(scene, dx=start + j * shift)
    if noise > 0:
        frames = np.clip(frames + rng.normal(0, noise, frames.shape), 0, 1).astype(np.float32)
    return frames, labels
