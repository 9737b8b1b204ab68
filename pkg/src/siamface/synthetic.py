"""Procedural stand-in for the ORL/AT&T corpus.

Writes a directory tree with the same layout as the real database
(``s1/1.pgm`` ... ``s40/10.pgm``, 92x112 binary PGM). Every subject gets a
fixed set of facial proportions; every image of that subject re-renders
them under a random pose, expression, lighting and sensor noise. It exists
so the loaders, training loop and services can be exercised when the real
corpus is not available; it is not a benchmark.
"""

from pathlib import Path

import numpy as np

from .pgm import write_pgm

WIDTH, HEIGHT = 92, 112


def _soft(d, edge=0.8):
    # smooth inside indicator from a signed distance (negative inside)
    return 1.0 / (1.0 + np.exp(np.clip(d / edge, -40, 40)))


def _ellipse(u, v, cx, cy, a, b):
    r = np.sqrt(((u - cx) / a) ** 2 + ((v - cy) / b) ** 2)
    return (r - 1.0) * min(a, b)


def random_identity(rng):
    return {
        "bg": rng.uniform(0.12, 0.5),
        "bg_slope": rng.uniform(-0.15, 0.15),
        "face_a": rng.uniform(22, 31),
        "face_b": rng.uniform(31, 40),
        "skin": rng.uniform(0.5, 0.85),
        "hair": rng.uniform(0.03, 0.45),
        "hairline": rng.uniform(0.45, 0.8),
        "hair_volume": rng.uniform(1.0, 1.25),
        "eye_y": rng.uniform(-14, -7),
        "eye_dx": rng.uniform(8.5, 13.5),
        "eye_r": rng.uniform(2.4, 4.2),
        "iris": rng.uniform(0.05, 0.35),
        "brow_gap": rng.uniform(3.5, 7.0),
        "brow_w": rng.uniform(0.8, 2.4),
        "brow_tilt": rng.uniform(-0.25, 0.25),
        "nose_len": rng.uniform(7, 14),
        "nose_w": rng.uniform(2.5, 6.0),
        "mouth_y": rng.uniform(11, 20),
        "mouth_w": rng.uniform(6.5, 13),
        "lip": rng.uniform(1.0, 2.6),
        "lip_shade": rng.uniform(0.15, 0.45),
        "glasses": rng.random() < 0.3,
        "beard": rng.random() < 0.2,
    }


def render_face(ident, rng):
    """Render one 112x92 image of ``ident`` with random nuisance factors."""
    angle = np.deg2rad(rng.normal(0, 5))
    scale = rng.uniform(0.94, 1.06)
    tx, ty = rng.normal(0, 2.0, size=2)
    yaw = rng.normal(0, 0.25)
    smile = rng.uniform(-0.3, 0.6)
    openness = rng.uniform(0.55, 1.0)

    y, x = np.mgrid[0:HEIGHT, 0:WIDTH].astype(np.float64)
    cx, cy = WIDTH / 2 + tx, HEIGHT / 2 + 2 + ty
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * (x - cx) + sa * (y - cy)) / scale
    v = (-sa * (x - cx) + ca * (y - cy)) / scale
    shift = yaw * 6.0

    p = ident
    img = p["bg"] + p["bg_slope"] * (x / WIDTH - 0.5)

    hair = _soft(_ellipse(u, v, 0, -6, p["face_a"] * p["hair_volume"], p["face_b"] * 1.08))
    img = img + (p["hair"] - img) * hair

    face_a = p["face_a"] * (1 - 0.15 * abs(yaw))
    face = _soft(_ellipse(u, v, shift * 0.3, 2, face_a, p["face_b"] * 0.92))
    face *= _soft(-(v + p["face_b"] * p["hairline"]) , 1.5)
    img = img + (p["skin"] - img) * face

    for side in (-1, 1):
        ex = side * p["eye_dx"] + shift
        ey = p["eye_y"]
        sclera = _soft(_ellipse(u, v, ex, ey, p["eye_r"] * 1.5, p["eye_r"] * openness))
        img = img + (0.9 - img) * sclera * 0.8
        iris = _soft(_ellipse(u, v, ex, ey, p["eye_r"] * 0.7, p["eye_r"] * 0.7 * openness))
        img = img + (p["iris"] - img) * iris
        by = ey - p["brow_gap"] + side * p["brow_tilt"] * (u - ex)
        brow = _soft(np.abs(v - by) - p["brow_w"], 0.7) * _soft(np.abs(u - ex) - p["eye_r"] * 2.0, 1.0)
        img = img + (p["hair"] - img) * brow * 0.9
        if p["glasses"]:
            ring = np.abs(_ellipse(u, v, ex, ey, p["eye_r"] * 2.4, p["eye_r"] * 2.0))
            img = img + (0.08 - img) * _soft(ring - 0.6, 0.5)

    nose = _soft(np.abs(u - shift * 1.2) - p["nose_w"] * (v + 4) / p["nose_len"], 1.0)
    nose *= _soft(np.abs(v - p["nose_len"] / 2 + 2) - p["nose_len"] / 2, 1.0)
    img = img - 0.12 * nose * (u - shift * 1.2 > 0)
    nostril = _soft(_ellipse(u, v, shift * 1.2, p["nose_len"] - 1, p["nose_w"], 1.2))
    img = img + (img * 0.6 - img) * nostril

    mx = u - shift
    curve = p["mouth_y"] - smile * (mx / p["mouth_w"]) ** 2 * 4.0
    mouth = _soft(np.abs(v - curve) - p["lip"], 0.6) * _soft(np.abs(mx) - p["mouth_w"], 1.0)
    img = img + (p["lip_shade"] - img) * mouth

    if p["beard"]:
        beard = _soft(_ellipse(u, v, shift * 0.3, p["mouth_y"] + 6, face_a * 0.8, 14)) * face
        img = img + (p["hair"] - img) * beard * 0.85

    light_dir = rng.uniform(0, 2 * np.pi)
    light = 1 + rng.uniform(0, 0.25) * (np.cos(light_dir) * (x / WIDTH - 0.5) +
                                         np.sin(light_dir) * (y / HEIGHT - 0.5))
    img = img * light * rng.uniform(0.9, 1.1) + rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_orl_like_tree(root, subjects=40, images=10, seed=0):
    """Write ``subjects`` x ``images`` PGM files under ``root``; returns root."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for s in range(1, subjects + 1):
        ident = random_identity(rng)
        sdir = root / f"s{s}"
        sdir.mkdir(parents=True, exist_ok=True)
        for i in range(1, images + 1):
            write_pgm(sdir / f"{i}.pgm", render_face(ident, rng))
    return root
