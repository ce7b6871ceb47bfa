"""Procedurally rendered depth scenes.

Each scene is a pinhole view of a ground plane, a back wall and 3-6 objects
(spheres and tilted rectangles).  Brightness falls off with distance and
surfaces carry Lambertian shading, an albedo and a light texture, so depth
is recoverable from monocular cues.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

MIN_DEPTH = 0.5
MAX_DEPTH = 10.0
INVALID_FRACTION = 0.05
CAMERA_HEIGHT = 1.65  # fixed rig, so ground depth is a function of image row
FALLOFF_DEPTH = 0.5   # brightness is FALLOFF_DEPTH / depth, reaching 1 at the nearest depth


@dataclass
class DepthSample:
    image: np.ndarray   # [H, W, 3] in [0, 1]
    depth: np.ndarray   # [H, W] meters, 0 where invalid
    mask: np.ndarray    # [H, W] bool

    def __post_init__(self):
        if self.image.shape[:2] != self.depth.shape or self.depth.shape != self.mask.shape:
            raise ContractError("image, depth and mask extents disagree")
        if not self.mask.any():
            raise ContractError("sample has no valid pixel")
        if np.any(self.depth[self.mask] <= 0):
            raise ContractError("valid pixels need positive depth")


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _rotation(yaw: float, pitch: float) -> np.ndarray:
    cy, sy, cp, sp = np.cos(yaw), np.sin(yaw), np.cos(pitch), np.sin(pitch)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    return ry @ rx


def synth_scene(seed: int, h: int, w: int) -> DepthSample:
    if h % 32 or w % 32 or h <= 0 or w <= 0:
        raise ContractError(f"scene extents ({h}, {w}) must be positive multiples of 32")
    rng = np.random.default_rng(seed)
    focal = 0.9 * w
    v, u = np.mgrid[0:h, 0:w] + 0.5
    rays = np.stack([(u - w / 2) / focal, -(v - h / 2) / focal, np.ones_like(u)], axis=-1)

    # Every surface reports (z-depth, normal, albedo, texture); the nearest wins.
    depth = np.full((h, w), np.inf)
    normal = np.zeros((h, w, 3))
    albedo = np.zeros((h, w, 3))
    texture = np.ones((h, w))

    def paint(t, n, alb, tex):
        hit = np.isfinite(t) & (t > 0) & (t < depth)
        depth[hit] = t[hit]
        normal[hit] = np.broadcast_to(n, (h, w, 3))[hit]
        albedo[hit] = alb
        texture[hit] = np.broadcast_to(tex, (h, w))[hit]

    light = _normalize(np.array([rng.uniform(-0.6, 0.6), 1.0, -rng.uniform(0.4, 1.0)]))

    wall_z = rng.uniform(7.5, 11.0)
    wall = np.full((h, w), wall_z)
    paint(wall, np.array([0.0, 0.0, -1.0]), rng.uniform(0.45, 0.9, 3), 1.0)

    cam_height = CAMERA_HEIGHT
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(rays[..., 1] < 0, -cam_height / rays[..., 1], np.inf)
    gp = rays * t_ground[..., None]
    with np.errstate(invalid="ignore"):
        checker = ((np.floor(gp[..., 0] * 1.5) + np.floor(gp[..., 2] * 1.5)) % 2)
    checker = np.where(np.isfinite(checker), checker, 0.0)
    paint(t_ground, np.array([0.0, 1.0, 0.0]), rng.uniform(0.4, 0.9, 3), 0.85 + 0.15 * checker)

    for _ in range(rng.integers(3, 7)):
        alb = rng.uniform(0.35, 1.0, 3)
        z = rng.uniform(1.5, 8.0)
        x = rng.uniform(-0.45, 0.45) * z * w / focal
        freq = rng.uniform(2.0, 6.0)
        if rng.random() < 0.5:
            r = rng.uniform(0.3, 1.1)
            y = -cam_height + r if rng.random() < 0.7 else rng.uniform(-0.5, 1.0)
            c = np.array([x, y, z])
            # |t d - c|^2 = r^2 with d = rays
            a = np.sum(rays * rays, axis=-1)
            b = -2.0 * rays @ c
            disc = b * b - 4 * a * (c @ c - r * r)
            with np.errstate(invalid="ignore"):
                t = (-b - np.sqrt(disc)) / (2 * a)
            t = np.where(disc >= 0, t, np.inf)
            p = rays * t[..., None]
            with np.errstate(invalid="ignore"):
                n = (p - c) / r
                tex = 0.9 + 0.1 * np.sin(freq * 3 * n[..., 0]) * np.sin(freq * 3 * n[..., 1])
            paint(t, np.nan_to_num(n), alb, np.nan_to_num(tex, nan=1.0))
        else:
            rot = _rotation(rng.uniform(-0.6, 0.6), rng.uniform(-0.4, 0.4))
            n = rot @ np.array([0.0, 0.0, -1.0])
            ax_u, ax_v = rot @ np.array([1.0, 0.0, 0.0]), rot @ np.array([0.0, 1.0, 0.0])
            half_u, half_v = rng.uniform(0.3, 1.4), rng.uniform(0.3, 1.2)
            c = np.array([x, rng.uniform(-cam_height + half_v, 0.8), z])
            denom = rays @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (c @ n) / denom
            p = rays * t[..., None] - c
            inside = (np.abs(p @ ax_u) <= half_u) & (np.abs(p @ ax_v) <= half_v)
            t = np.where(inside & (np.abs(denom) > 1e-9), t, np.inf)
            stripes = 0.88 + 0.12 * np.sign(np.sin(freq * (p @ ax_u)))
            paint(t, n, alb, stripes)

    depth = np.clip(depth, MIN_DEPTH, MAX_DEPTH)
    # Normals face the camera for shading.
    facing = np.where((np.sum(normal * rays, axis=-1) > 0)[..., None], -normal, normal)
    lambert = np.clip(facing @ light, 0.0, 1.0)
    falloff = np.minimum(1.0, FALLOFF_DEPTH / depth)
    shade = (0.3 + 0.7 * lambert) * falloff * texture
    image = albedo * shade[..., None] + rng.normal(0.0, 0.01, (h, w, 3))
    image = np.clip(image, 0.0, 1.0)

    mask = rng.random((h, w)) >= INVALID_FRACTION
    depth = np.where(mask, depth, 0.0)
    return DepthSample(image=image, depth=depth, mask=mask)


def split_seeds(seed: int, train_size: int, val_size: int) -> tuple[list[int], list[int]]:
    """Disjoint per-sample seeds for the training and validation splits."""
    base = 1_000_003 * (seed + 1)
    return ([base + i for i in range(train_size)],
            [base + 500_000 + i for i in range(val_size)])


def make_dataset(seeds: list[int], h: int, w: int) -> list[DepthSample]:
    return [synth_scene(s, h, w) for s in seeds]


def downsample_target(depth: np.ndarray, mask: np.ndarray, factor: int) -> tuple[np.ndarray, np.ndarray]:
    """Valid-masked block mean of the depth; a block is valid only if all its pixels are."""
    *lead, h, w = depth.shape
    d = depth.reshape(*lead, h // factor, factor, w // factor, factor)
    m = mask.reshape(d.shape)
    count = m.sum(axis=(-3, -1))
    total = np.where(m, d, 0.0).sum(axis=(-3, -1))
    mean = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return mean, m.all(axis=(-3, -1))


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)
