"""Procedural multiscale scenes.

Ground truth comes from exact ray casting against an analytic scene (spheres
over a checkered floor), box-filtered over a regular grid of sub-pixel
samples. The multiscale set holds every image at factors 1, 2, 4 and 8,
built by box downsampling with matching intrinsics.

On-disk layout::

    <root>/transforms_train.json
    <root>/transforms_test.json
    <root>/train/r_<idx>_s<scale>.png   (+ .npy float32 sidecar)
    <root>/test/r_<idx>_s<scale>.png

The transforms files follow the NeRF-synthetic convention (``camera_angle_x``
and a ``frames`` list with 4x4 camera-to-world ``transform_matrix``), plus
optional ``near``/``far``/``width``/``height`` keys.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from PIL import Image

from . import rng as rng_mod
from .geometry import Camera

SCALES = (1, 2, 4, 8)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple


@dataclass(frozen=True)
class SceneSpec:
    spheres: tuple = ()
    background: tuple = (1.0, 1.0, 1.0)
    floor_z: float = None
    floor_half: float = 1.2
    checker_size: float = 0.2
    checker_colors: tuple = ((0.85, 0.85, 0.8), (0.15, 0.2, 0.3))
    light_dir: tuple = (0.4, 0.3, 0.85)
    ambient: float = 0.3

    def scaled(self, s):
        """Same scene with every length multiplied by ``s``."""
        return SceneSpec(
            spheres=tuple(Sphere(tuple(np.multiply(sp.center, s)), sp.radius * s, sp.albedo)
                          for sp in self.spheres),
            background=self.background,
            floor_z=None if self.floor_z is None else self.floor_z * s,
            floor_half=self.floor_half * s,
            checker_size=self.checker_size * s,
            checker_colors=self.checker_colors,
            light_dir=self.light_dir,
            ambient=self.ambient,
        )


def three_spheres():
    return SceneSpec(
        spheres=(
            Sphere((0.0, 0.0, -0.15), 0.45, (0.9, 0.25, 0.2)),
            Sphere((0.65, -0.45, -0.3), 0.3, (0.2, 0.75, 0.3)),
            Sphere((-0.55, 0.55, -0.35), 0.25, (0.25, 0.35, 0.9)),
        ),
        floor_z=-0.6,
    )


def trace(scene: SceneSpec, origins, dirs):
    """Shade rays (N, 3) against the scene; returns colors (N, 3)."""
    n = origins.shape[0]
    t_hit = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (n, 3)).copy()
    lit = np.zeros(n, dtype=bool)
    for sp in scene.spheres:
        oc = origins - np.asarray(sp.center)
        a = np.sum(dirs * dirs, -1)
        b = np.sum(oc * dirs, -1)
        c = np.sum(oc * oc, -1) - sp.radius**2
        disc = b * b - a * c
        ok = disc >= 0
        t = np.where(ok, (-b - np.sqrt(np.where(ok, disc, 0))) / a, np.inf)
        t = np.where(t > 1e-9, t, np.inf)
        closer = t < t_hit
        t_hit = np.where(closer, t, t_hit)
        p = origins + np.where(closer, t, 0.0)[:, None] * dirs
        normal = np.where(closer[:, None], (p - np.asarray(sp.center)) / sp.radius, normal)
        albedo = np.where(closer[:, None], np.asarray(sp.albedo), albedo)
        lit |= closer
    if scene.floor_z is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (scene.floor_z - origins[:, 2]) / dirs[:, 2]
        p = origins + np.where(np.isfinite(t), t, 0)[:, None] * dirs
        inside = (np.abs(p[:, 0]) <= scene.floor_half) & (np.abs(p[:, 1]) <= scene.floor_half)
        t = np.where((t > 1e-9) & inside, t, np.inf)
        closer = t < t_hit
        t_hit = np.where(closer, t, t_hit)
        cell = (np.floor(p[:, 0] / scene.checker_size) + np.floor(p[:, 1] / scene.checker_size)) % 2
        tile = np.where(cell[:, None] == 0, np.asarray(scene.checker_colors[0]),
                        np.asarray(scene.checker_colors[1]))
        normal = np.where(closer[:, None], np.array([0.0, 0.0, 1.0]), normal)
        albedo = np.where(closer[:, None], tile, albedo)
        lit |= closer
    light = np.asarray(scene.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shade = scene.ambient + (1 - scene.ambient) * np.maximum(normal @ light, 0.0)
    return np.where(lit[:, None], albedo * shade[:, None], albedo)


def generate_scene(scene: SceneSpec, camera: Camera, spp=16, chunk=1 << 18):
    """Box-filtered ground truth image (H, W, 3) in [0, 1].

    ``spp`` must be a perfect square; sub-pixel samples sit on a regular grid.
    """
    k = int(round(np.sqrt(spp)))
    if k * k != spp:
        raise ValueError(f"spp must be a perfect square, got {spp}")
    if camera.width < 1 or camera.height < 1 or not camera.focal > 0:
        raise ValueError("degenerate camera")
    offs = (np.arange(k) + 0.5) / k - 0.5
    jitter = np.stack(np.meshgrid(offs, offs, indexing="xy"), -1).reshape(-1, 2)
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    img = np.zeros((rows.size, 3))
    for j in jitter:
        for start in range(0, rows.size, chunk):
            sl = slice(start, start + chunk)
            d = camera.directions(cols[sl], rows[sl], np.broadcast_to(j, (len(rows[sl]), 2)))
            o = np.broadcast_to(camera.origin, d.shape)
            img[sl] += trace(scene, o, d)
    return np.clip(img / len(jitter), 0.0, 1.0).reshape(camera.height, camera.width, 3)


def box_downsample(image, factor):
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by {factor}")
    return image.reshape(h // factor, factor, w // factor, factor, *image.shape[2:]).mean(axis=(1, 3))


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix for a camera at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    z = position - np.asarray(target)
    z /= np.linalg.norm(z)
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, position
    return pose


@dataclass(frozen=True)
class RigSpec:
    n_train: int = 16
    n_test: int = 4
    radius: float = 3.5
    elevation_deg: tuple = (20.0, 60.0)
    fov_x_deg: float = 45.0
    width: int = 128
    height: int = 128
    near: float = 1.5
    far: float = 5.5


def camera_rig(rig: RigSpec, seed=0, scale=1.0):
    """(train cameras, test cameras) on a sphere around the origin."""
    gen = rng_mod.stream(seed, rng_mod.DATA, "rig")
    focal = 0.5 * rig.width / np.tan(0.5 * np.radians(rig.fov_x_deg))

    def ring(n, offset):
        az = 2 * np.pi * (np.arange(n) + offset + gen.uniform(-0.2, 0.2, n)) / n
        el = np.radians(gen.uniform(*rig.elevation_deg, n))
        pos = rig.radius * scale * np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], -1)
        return [Camera(look_at(p), focal, rig.width, rig.height, rig.near * scale, rig.far * scale)
                for p in pos]

    return ring(rig.n_train, 0.0), ring(rig.n_test, 0.5)


@dataclass
class MultiscaleDataset:
    """Images and cameras per scale factor, for one split."""

    images: Dict[int, List[np.ndarray]] = field(default_factory=dict)
    cameras: Dict[int, List[Camera]] = field(default_factory=dict)

    @staticmethod
    def area_weight(factor):
        return float(factor * factor)

    @property
    def scales(self):
        return sorted(self.images)

    def pixel_count(self):
        return sum(im.shape[0] * im.shape[1] for s in self.images for im in self.images[s])


def build_multiscale(images, cameras, scales=SCALES):
    ds = MultiscaleDataset()
    for s in scales:
        ds.images[s] = [im if s == 1 else box_downsample(im, s) for im in images]
        ds.cameras[s] = [c if s == 1 else c.downscaled(s) for c in cameras]
    return ds


@dataclass(frozen=True)
class DataConfig:
    scene: str = "three-spheres"
    scene_scale: float = 1.0
    spp: int = 16
    rig: RigSpec = field(default_factory=RigSpec)
    seed: int = 0


SCENES = {"three-spheres": three_spheres, "empty": lambda: SceneSpec()}


def make_dataset(cfg: DataConfig):
    """(train, test) multiscale datasets for a procedural scene."""
    scene = SCENES[cfg.scene]().scaled(cfg.scene_scale)
    train_cams, test_cams = camera_rig(cfg.rig, cfg.seed, cfg.scene_scale)
    train = build_multiscale([generate_scene(scene, c, cfg.spp) for c in train_cams], train_cams)
    test = build_multiscale([generate_scene(scene, c, cfg.spp) for c in test_cams], test_cams)
    return train, test


# -- I/O ------------------------------------------------------------------------

def to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image):
    Image.fromarray(to_uint8(image)).save(path, optimize=False)


def read_png(path, background=(1.0, 1.0, 1.0)):
    """Float RGB image; RGBA is composited over ``background``."""
    arr = np.asarray(Image.open(path)).astype(np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, -1)
    if arr.shape[-1] == 4:
        a = arr[..., 3:]
        arr = arr[..., :3] * a + np.asarray(background) * (1 - a)
    return arr[..., :3]


def _camera_json(cameras, split):
    c0 = cameras[0]
    return {
        "camera_angle_x": float(2 * np.arctan(0.5 * c0.width / c0.focal)),
        "width": c0.width,
        "height": c0.height,
        "near": c0.near,
        "far": c0.far,
        "frames": [{"file_path": f"./{split}/r_{i}", "transform_matrix": c.pose.tolist()}
                   for i, c in enumerate(cameras)],
    }


def save_dataset(root, train: MultiscaleDataset, test: MultiscaleDataset, float_sidecar=True):
    for split, ds in (("train", train), ("test", test)):
        os.makedirs(os.path.join(root, split), exist_ok=True)
        with open(os.path.join(root, f"transforms_{split}.json"), "w") as f:
            json.dump(_camera_json(ds.cameras[1], split), f, indent=2)
            f.write("\n")
        for s in ds.scales:
            for i, im in enumerate(ds.images[s]):
                base = os.path.join(root, split, f"r_{i}_s{s}")
                write_png(base + ".png", im)
                if float_sidecar:
                    np.save(base + ".npy", im.astype(np.float32))


def _read_scaled(base, s):
    # Prefer the lossless float sidecar when it exists.
    npy = f"{base}_s{s}.npy"
    if os.path.exists(npy):
        return np.load(npy).astype(np.float64)
    return read_png(f"{base}_s{s}.png")


def load_split(root, split, scales=SCALES, near=None, far=None):
    """Load one split; falls back to downsampling ``<file_path>.png`` when
    per-scale files are absent (plain NeRF-synthetic layout)."""
    with open(os.path.join(root, f"transforms_{split}.json")) as f:
        meta = json.load(f)
    images, cameras = [], []
    per_scale = {s: [] for s in scales}
    for frame in meta["frames"]:
        base = os.path.normpath(os.path.join(root, frame["file_path"]))
        if base.endswith(".png"):
            base = base[:-4]
        pose = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if os.path.exists(f"{base}_s1.png"):
            full = _read_scaled(base, 1)
            for s in scales:
                per_scale[s].append(full if s == 1 else _read_scaled(base, s))
        else:
            full = read_png(base + ".png")
            for s in scales:
                per_scale[s].append(full if s == 1 else box_downsample(full, s))
        h, w = full.shape[:2]
        focal = 0.5 * w / np.tan(0.5 * meta["camera_angle_x"])
        cameras.append(Camera(pose, focal, w, h, meta.get("near", near or 2.0), meta.get("far", far or 6.0)))
        images.append(full)
    ds = MultiscaleDataset()
    for s in scales:
        ds.images[s] = per_scale[s]
        ds.cameras[s] = [c if s == 1 else c.downscaled(s) for c in cameras]
    return ds
