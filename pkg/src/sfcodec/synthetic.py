"""Procedural face-like images with identity-level structure.

Each identity fixes skin/hair/eye colours and facial geometry; each image
perturbs pose, lighting, expression, background and sensor noise. The result
is a stand-in corpus with the same directory layout as an aligned face set.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def _soft(d, sharpness):
    # d < 0 inside the shape
    return 1.0 / (1.0 + np.exp(np.clip(d * sharpness, -50, 50)))


def _ellipse(x, y, cx, cy, ax, ay):
    return np.sqrt(((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2) - 1.0


def sample_identity(rng):
    return {
        "skin": rng.uniform([0.35, 0.22, 0.15], [0.95, 0.80, 0.70]),
        "hair": rng.uniform(0.0, 0.9, 3) * rng.uniform(0.3, 1.0),
        "iris": rng.uniform(0.05, 0.7, 3),
        "lips": rng.uniform([0.45, 0.1, 0.1], [0.9, 0.45, 0.45]),
        "face_w": rng.uniform(0.48, 0.66),
        "face_h": rng.uniform(0.64, 0.82),
        "hairline": rng.uniform(-0.55, -0.25),
        "hair_volume": rng.uniform(0.0, 0.18),
        "eye_dx": rng.uniform(0.18, 0.32),
        "eye_y": rng.uniform(-0.18, 0.0),
        "eye_r": rng.uniform(0.06, 0.11),
        "brow": rng.uniform(0.015, 0.05),
        "nose_len": rng.uniform(0.12, 0.3),
        "nose_w": rng.uniform(0.04, 0.1),
        "mouth_y": rng.uniform(0.3, 0.48),
        "mouth_w": rng.uniform(0.12, 0.26),
        "beard": float(rng.uniform() < 0.3),
        "glasses": float(rng.uniform() < 0.25),
    }


def render_face(ident, rng, size=64):
    """Render one HxWx3 float image in [0, 1]."""
    lin = (np.arange(size) + 0.5) / size * 2 - 1
    gx, gy = np.meshgrid(lin, lin)
    ang = np.deg2rad(rng.uniform(-8, 8))
    s = rng.uniform(0.93, 1.07)
    dx, dy = rng.uniform(-0.06, 0.06, 2)
    x = (np.cos(ang) * (gx - dx) + np.sin(ang) * (gy - dy)) / s
    y = (-np.sin(ang) * (gx - dx) + np.cos(ang) * (gy - dy)) / s
    sharp = size / 2.0

    bg0, bg1 = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
    t = np.clip((gy + 1) / 2, 0, 1)[..., None]
    img = bg0 * (1 - t) + bg1 * t
    img = img + 0.03 * np.sin(gx[..., None] * rng.uniform(2, 9) + rng.uniform(0, 6))

    def paint(mask, colour):
        nonlocal img
        m = mask[..., None]
        img = img * (1 - m) + np.asarray(colour) * m

    fw, fh = ident["face_w"], ident["face_h"]
    # hair behind the head
    hv = ident["hair_volume"]
    paint(_soft(_ellipse(x, y, 0, -0.1, fw + hv, fh + hv * 0.6), sharp), ident["hair"])
    paint(_soft(_ellipse(x, y, 0, 0.02, fw, fh), sharp), ident["skin"])
    # hair fringe above the hairline
    fringe = _soft(_ellipse(x, y, 0, 0.02, fw + 0.01, fh + 0.01), sharp) * _soft(y - ident["hairline"], sharp)
    paint(fringe, ident["hair"])

    open_eye = rng.uniform(0.6, 1.0)
    for side in (-1, 1):
        ex, ey, er = side * ident["eye_dx"], ident["eye_y"], ident["eye_r"]
        paint(_soft(_ellipse(x, y, ex, ey, er * 1.4, er * open_eye), sharp), (0.95, 0.95, 0.92))
        paint(_soft(_ellipse(x, y, ex, ey, er * 0.6, er * 0.6 * open_eye), sharp), ident["iris"])
        paint(_soft(_ellipse(x, y, ex, ey, er * 0.25, er * 0.25), sharp), (0.02, 0.02, 0.02))
        brow = _soft(_ellipse(x, y, ex, ey - er * 1.9, er * 1.6, ident["brow"]), sharp)
        paint(brow, ident["hair"] * 0.8)
        if ident["glasses"]:
            ring = np.abs(_ellipse(x, y, ex, ey, er * 2.0, er * 1.7))
            paint(_soft(ring - 0.12, sharp) * 0.9, (0.1, 0.1, 0.12))

    skin = np.asarray(ident["skin"])
    nose = _soft(_ellipse(x, y, 0, ident["eye_y"] + ident["nose_len"] * 0.9, ident["nose_w"], ident["nose_len"] * 0.5), sharp)
    paint(nose * 0.6, skin * 0.75)

    smile = rng.uniform(-0.06, 0.1)
    my = ident["mouth_y"] - smile * (1 - (x / ident["mouth_w"]) ** 2)
    mouth = _soft(np.maximum(np.abs(x) / ident["mouth_w"] - 1, np.abs(y - my) / 0.035 - 1), sharp)
    paint(mouth, ident["lips"])
    if ident["beard"]:
        chin = _soft(_ellipse(x, y, 0, 0.02, fw, fh), sharp) * _soft(ident["mouth_y"] - 0.05 - y, sharp)
        paint(chin * 0.85, ident["hair"] * 0.7)

    gain = rng.uniform(0.8, 1.15)
    lx, ly = rng.uniform(-0.25, 0.25, 2)
    img = img * (gain + lx * gx + ly * gy)[..., None]
    img = img + rng.normal(0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def identity_name(i):
    return f"person_{i:03d}"


def make_corpus(root, identities=16, images_per_identity=50, size=64, seed=0):
    """Write ``root/<name>/<name>_NNNN.png``; returns the list of identity names."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(identities):
        ident = sample_identity(rng)
        name = identity_name(i)
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for j in range(images_per_identity):
            img = render_face(ident, rng, size)
            Image.fromarray((img * 255 + 0.5).astype(np.uint8)).save(d / f"{name}_{j + 1:04d}.png")
        names.append(name)
    return names
