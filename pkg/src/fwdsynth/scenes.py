"""Scene bundles: synthetic generation, manifest I/O, image and depth codecs.

A scene bundle is a set of posed RGB views with optional per-pixel depth
and validity masks. The on-disk form is a JSON manifest listing per view
the image path, optional depth/mask paths, intrinsics, and a row-major
camera-from-world rotation + translation; the convention is stated
explicitly in the manifest so files are self-describing.

Synthetic scenes are rendered analytically (ray casting against planes or
a box) with exact depth, which gives tests a noise-free geometric oracle.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DomainError, FormatError, IoError, ShapeError
from .geometry import Intrinsics, Pose, camera_center, check_rotation, look_at, pixel_grid

MANIFEST_CONVENTION = "camera_from_world"

GEOMETRIES = ("plane", "cube", "two-planes")
TEXTURES = ("checker", "perlin", "flat")


@dataclass
class SceneView:
    image: np.ndarray                 # (H, W, 3) float in [0, 1]
    intr: Intrinsics
    pose: Pose
    depth: np.ndarray | None = None   # (H, W) float, 0 where invalid
    mask: np.ndarray | None = None    # (H, W) bool, depth validity

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"image must be (H, W, 3), got {self.image.shape}")
        h, w = self.image.shape[:2]
        if (h, w) != (self.intr.height, self.intr.width):
            raise ShapeError(f"image size {(h, w)} != intrinsics {(self.intr.height, self.intr.width)}")
        if self.depth is not None:
            self.depth = np.asarray(self.depth)
            if self.depth.shape != (h, w):
                raise ShapeError(f"depth shape {self.depth.shape} != image {(h, w)}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask).astype(bool)
            if self.mask.shape != (h, w):
                raise ShapeError(f"mask shape {self.mask.shape} != image {(h, w)}")

    @property
    def valid_mask(self) -> np.ndarray:
        if self.mask is not None:
            return self.mask
        if self.depth is not None:
            return self.depth > 0
        return np.zeros(self.image.shape[:2], dtype=bool)


@dataclass
class SceneBundle:
    name: str
    views: list = field(default_factory=list)

    def __len__(self):
        return len(self.views)

    def has_depth(self) -> bool:
        return all(v.depth is not None for v in self.views)


# -- analytic geometry ----------------------------------------------------


def _rays(intr: Intrinsics, pose: Pose):
    gx, gy = pixel_grid(intr)
    d_cam = np.stack([(gx - intr.cx) / intr.fx, (gy - intr.cy) / intr.fy,
                      np.ones_like(gx)], axis=1)
    d_world = d_cam @ pose.R
    return camera_center(pose), d_world


def _intersect_plane_z(c, d, z0):
    """Ray-plane for the world plane z = z0; returns t (camera depth)."""
    dz = d[:, 2]
    t = np.where(np.abs(dz) > 1e-12, (z0 - c[2]) / np.where(np.abs(dz) > 1e-12, dz, 1.0), -1.0)
    return t


def _intersect_box(c, d, lo, hi):
    """Slab test. Returns (t_enter, hit, face) with face in 0..5 (axis*2+is_high)."""
    d_safe = np.where(np.abs(d) < 1e-12, 1e-12, d)
    inv = 1.0 / d_safe
    t1 = (lo - c) * inv
    t2 = (hi - c) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    hit = (t_exit >= t_enter) & (t_enter > 1e-9)
    axis = tmin.argmax(axis=1)
    rows = np.arange(d.shape[0])
    entered_high = t1[rows, axis] >= t2[rows, axis]
    face = axis * 2 + entered_high.astype(int)
    return t_enter, hit, face


# -- textures --------------------------------------------------------------

_PALETTE = np.array([
    [0.85, 0.25, 0.20], [0.20, 0.60, 0.85], [0.95, 0.80, 0.25],
    [0.30, 0.75, 0.35], [0.70, 0.35, 0.80], [0.90, 0.55, 0.15],
    [0.25, 0.25, 0.70], [0.60, 0.60, 0.60],
])


def _checker(u, v, scale, color_a, color_b):
    cell = (np.floor(u / scale) + np.floor(v / scale)).astype(np.int64) & 1
    return np.where(cell[:, None] == 0, color_a, color_b)


def _value_noise(u, v, rng, octaves=3, base_freq=2.0):
    """Smooth value noise in [0, 1] over unit-ish uv coordinates."""
    out = np.zeros_like(u)
    total = 0.0
    for o in range(octaves):
        freq = base_freq * (2.0 ** o)
        amp = 0.55 ** o
        n = int(np.ceil(freq)) + 2
        grid = rng.uniform(size=(n + 2, n + 2))
        x = (u % 1.0) * freq
        y = (v % 1.0) * freq
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        fx = x - x0
        fy = y - y0
        sx = fx * fx * (3 - 2 * fx)
        sy = fy * fy * (3 - 2 * fy)
        g00 = grid[y0, x0]
        g01 = grid[y0, x0 + 1]
        g10 = grid[y0 + 1, x0]
        g11 = grid[y0 + 1, x0 + 1]
        out += amp * ((g00 * (1 - sx) + g01 * sx) * (1 - sy) + (g10 * (1 - sx) + g11 * sx) * sy)
        total += amp
    return out / total


def _texture(kind: str, u, v, rng, face=None, palette_offset=0):
    if kind == "checker":
        a = _PALETTE[(palette_offset + 0) % len(_PALETTE)]
        b = _PALETTE[(palette_offset + 2) % len(_PALETTE)]
        return _checker(u, v, 0.25, a, b)
    if kind == "perlin":
        r = _value_noise(u * 0.5 + 0.5, v * 0.5 + 0.5, rng)
        g = _value_noise(u * 0.5 + 0.25, v * 0.5 + 0.75, rng)
        bl = _value_noise(u * 0.5 + 0.75, v * 0.5 + 0.25, rng)
        return np.stack([0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * bl], axis=1)
    if kind == "flat":
        if face is None:
            face = np.zeros(u.shape[0], dtype=np.int64)
        return _PALETTE[(face + palette_offset) % len(_PALETTE)]
    raise DomainError(f"unknown texture {kind!r}, expected one of {TEXTURES}")


# -- synthetic bundle generation --------------------------------------------


def generate_synthetic(geometry: str = "two-planes", texture: str = "perlin",
                       n_views: int = 4, resolution=(96, 128), seed: int = 0,
                       arc_deg: float = 8.0, fov_scale: float = 1.0) -> SceneBundle:
    """Render an analytic scene from cameras on an arc around it.

    geometry: "plane" (fronto-parallel plane at z=2), "cube" (box at z=2.5),
    or "two-planes" (foreground square at z=2.2 over a background at z=3.2).
    Depth maps are exact; masks mark pixels whose ray hits the geometry.
    """
    if geometry not in GEOMETRIES:
        raise DomainError(f"unknown geometry {geometry!r}, expected one of {GEOMETRIES}")
    if texture not in TEXTURES:
        raise DomainError(f"unknown texture {texture!r}, expected one of {TEXTURES}")
    if n_views < 1:
        raise DomainError("n_views must be >= 1")
    h, w = int(resolution[0]), int(resolution[1])
    rng = np.random.default_rng(seed)
    tex_rng = np.random.default_rng(seed + 1)

    focal = 1.1 * max(h, w) * fov_scale
    intr = Intrinsics(focal, focal, (w - 1) / 2.0, (h - 1) / 2.0, w, h)

    if geometry == "plane":
        center = np.array([0.0, 0.0, 2.0])
        ring_radius = 2.0
    elif geometry == "cube":
        center = np.array([0.0, 0.0, 2.5])
        ring_radius = 2.5
    else:
        center = np.array([0.0, 0.0, 2.6])
        ring_radius = 2.6

    # Fixed per-surface texture seeds so every view samples the same lattice.
    tex_seeds = [int(tex_rng.integers(2 ** 63)) for _ in range(4)]

    views = []
    angles = (np.linspace(-1.0, 1.0, n_views) if n_views > 1 else np.zeros(1))
    angles = angles * np.deg2rad(arc_deg)
    for vi, ang in enumerate(angles):
        eye = center + ring_radius * np.array([np.sin(ang), 0.0, -np.cos(ang)])
        eye = eye + np.array([0.0, 0.04 * np.sin(2.3 * ang), 0.0])
        pose = look_at(eye, center)
        c, d = _rays(intr, pose)

        if geometry == "plane":
            t = _intersect_plane_z(c, d, 2.0)
            pts = c + t[:, None] * d
            color = _texture(texture, pts[:, 0], pts[:, 1], np.random.default_rng(tex_seeds[0]))
            depth = t
            hit = t > 0
        elif geometry == "cube":
            half = 0.62
            lo = center - half
            hi = center + half
            t, hit, face = _intersect_box(c, d, lo, hi)
            pts = c + t[:, None] * d
            local = (pts - center) / half
            axis = face // 2
            u = np.where(axis == 0, local[:, 1], local[:, 0])
            v = np.where(axis == 2, local[:, 1], local[:, 2])
            color = _texture(texture, u, v, np.random.default_rng(tex_seeds[1]), face=face)
            depth = np.where(hit, t, 0.0)
        else:
            t_bg = _intersect_plane_z(c, d, 3.2)
            t_fg = _intersect_plane_z(c, d, 2.2)
            pts_fg = c + t_fg[:, None] * d
            on_square = (np.abs(pts_fg[:, 0]) < 0.45) & (np.abs(pts_fg[:, 1] + 0.05) < 0.33) & (t_fg > 0)
            t = np.where(on_square, t_fg, t_bg)
            pts = c + t[:, None] * d
            color_bg = _texture(texture, pts[:, 0] * 0.8, pts[:, 1] * 0.8,
                                np.random.default_rng(tex_seeds[2]), palette_offset=1)
            color_fg = _texture(texture, pts[:, 0] * 1.7 + 0.37, pts[:, 1] * 1.7 + 0.11,
                                np.random.default_rng(tex_seeds[3]), palette_offset=3)
            color = np.where(on_square[:, None], color_fg, color_bg)
            depth = t
            hit = t > 0

        img = np.clip(color, 0.0, 1.0).reshape(h, w, 3)
        views.append(SceneView(
            image=img.astype(np.float64),
            intr=intr,
            pose=pose,
            depth=np.where(hit, depth, 0.0).reshape(h, w),
            mask=hit.reshape(h, w),
        ))
    return SceneBundle(name=f"{geometry}-{texture}-{seed}", views=views)


def degrade_depth(depth: np.ndarray, drop_fraction: float = 0.0, noise_sigma: float = 0.0,
                  rng: np.random.Generator | None = None, relative: bool = False):
    """Simulate a sparse, noisy sensor from exact depth.

    Drops a Bernoulli fraction of valid pixels (mask=0, depth=0) and adds
    Gaussian noise (scaled by the depth itself when relative=True).
    Returns (degraded_depth, mask).
    """
    if not 0.0 <= drop_fraction <= 1.0:
        raise DomainError("drop_fraction must be in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(0)
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    keep = rng.uniform(size=depth.shape) >= drop_fraction
    mask = valid & keep
    noise = rng.normal(size=depth.shape) * noise_sigma
    if relative:
        noise = noise * depth
    noisy = np.clip(depth + noise, 1e-3, None)
    return np.where(mask, noisy, 0.0), mask


# -- image / depth codecs ----------------------------------------------------


def write_image(path: str, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


def read_image(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise IoError(f"image not found: {path}")
    try:
        img = Image.open(path)
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except IoError:
        raise
    except Exception as exc:
        raise FormatError(f"unreadable image {path}: {exc}") from exc
    return arr


def write_pfm(path: str, data: np.ndarray) -> None:
    """Write a single-channel portable float map (little-endian, bottom-up)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ShapeError("pfm writer expects a 2-D array")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).tobytes())


def read_pfm(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise IoError(f"depth map not found: {path}")
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise FormatError(f"{path}: not a single-channel PFM file")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError(f"{path}: malformed PFM size line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise FormatError(f"{path}: PFM payload truncated")
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(raw, dtype=dt).reshape(h, w)
    return np.flipud(data).astype(np.float64)


def write_mask(path: str, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask).astype(np.uint8)) * 255).save(path)


def read_mask(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise IoError(f"mask not found: {path}")
    return np.asarray(Image.open(path).convert("L")) > 127


# -- manifests ---------------------------------------------------------------


def save_bundle(bundle: SceneBundle, out_dir: str) -> str:
    """Write images/depths/masks plus manifest.json; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, v in enumerate(bundle.views):
        img_name = f"view{i:03d}.png"
        write_image(os.path.join(out_dir, img_name), v.image)
        entry = {
            "image": img_name,
            "fx": v.intr.fx, "fy": v.intr.fy, "cx": v.intr.cx, "cy": v.intr.cy,
            "width": v.intr.width, "height": v.intr.height,
            "rotation": [float(x) for x in np.asarray(v.pose.R).reshape(-1)],
            "translation": [float(x) for x in np.asarray(v.pose.T).reshape(-1)],
        }
        if v.depth is not None:
            depth_name = f"view{i:03d}.pfm"
            write_pfm(os.path.join(out_dir, depth_name), v.depth)
            entry["depth"] = depth_name
        if v.mask is not None:
            mask_name = f"view{i:03d}_mask.png"
            write_mask(os.path.join(out_dir, mask_name), v.mask)
            entry["mask"] = mask_name
        entries.append(entry)
    manifest = {"name": bundle.name, "convention": MANIFEST_CONVENTION, "views": entries}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    return path


_REQUIRED_VIEW_KEYS = ("image", "fx", "fy", "cx", "cy", "width", "height",
                       "rotation", "translation")


def load_bundle(manifest_path: str) -> SceneBundle:
    if not os.path.exists(manifest_path):
        raise IoError(f"manifest not found: {manifest_path}")
    try:
        with open(manifest_path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{manifest_path}: manifest must be a JSON object")
    if doc.get("convention") != MANIFEST_CONVENTION:
        raise FormatError(
            f"{manifest_path}: manifest must declare convention "
            f"'{MANIFEST_CONVENTION}', got {doc.get('convention')!r}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    views = []
    for i, entry in enumerate(doc.get("views", [])):
        for key in _REQUIRED_VIEW_KEYS:
            if key not in entry:
                raise FormatError(f"{manifest_path}: view {i} missing key {key!r}")
        R = np.asarray(entry["rotation"], dtype=np.float64)
        T = np.asarray(entry["translation"], dtype=np.float64)
        if R.size != 9 or T.size != 3:
            raise FormatError(f"{manifest_path}: view {i} pose has wrong length")
        R = R.reshape(3, 3)
        try:
            check_rotation(R, tol=1e-6)
        except DomainError as exc:
            raise FormatError(f"{manifest_path}: view {i} rotation not orthonormal within 1e-6") from exc
        intr = Intrinsics(float(entry["fx"]), float(entry["fy"]), float(entry["cx"]),
                          float(entry["cy"]), int(entry["width"]), int(entry["height"]))
        image = read_image(os.path.join(base, entry["image"]))
        if image.shape[:2] != (intr.height, intr.width):
            raise FormatError(
                f"{manifest_path}: view {i} image size {image.shape[:2]} does not match "
                f"declared ({intr.height}, {intr.width})")
        depth = read_pfm(os.path.join(base, entry["depth"])) if "depth" in entry else None
        mask = read_mask(os.path.join(base, entry["mask"])) if "mask" in entry else None
        views.append(SceneView(image=image, intr=intr, pose=Pose(R, T), depth=depth, mask=mask))
    return SceneBundle(name=doc.get("name", "scene"), views=views)


def load_pose_file(path: str) -> list:
    """Read a pose list: {"convention": ..., "poses": [{"rotation": 9, "translation": 3}]}."""
    if not os.path.exists(path):
        raise IoError(f"pose file not found: {path}")
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: pose file must be a JSON object")
    if doc.get("convention") != MANIFEST_CONVENTION:
        raise FormatError(f"{path}: pose file must declare convention '{MANIFEST_CONVENTION}'")
    poses = []
    for i, entry in enumerate(doc.get("poses", [])):
        R = np.asarray(entry.get("rotation", []), dtype=np.float64)
        T = np.asarray(entry.get("translation", []), dtype=np.float64)
        if R.size != 9 or T.size != 3:
            raise FormatError(f"{path}: pose {i} has wrong length")
        R = R.reshape(3, 3)
        try:
            check_rotation(R, tol=1e-6)
        except DomainError as exc:
            raise FormatError(f"{path}: pose {i} rotation not orthonormal within 1e-6") from exc
        poses.append(Pose(R, T))
    return poses


def save_pose_file(path: str, poses) -> None:
    doc = {
        "convention": MANIFEST_CONVENTION,
        "poses": [{
            "rotation": [float(x) for x in np.asarray(p.R).reshape(-1)],
            "translation": [float(x) for x in np.asarray(p.T).reshape(-1)],
        } for p in poses],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
