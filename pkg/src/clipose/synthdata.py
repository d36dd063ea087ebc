"""Procedural object instances, (points, image patch, text) triplets,
augmentation, and the on-disk dataset format.

Canonical frame conventions: every instance is centred on its tight
bounding box, +y is the up / spin axis, and +z is the "front" of
non-symmetric objects.
"""
from __future__ import annotations

import dataclasses
import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .geometry import CameraIntrinsics, Pose, SymmetrySpec, axis_angle_matrix, project

CATEGORY_NAMES = ("bottle", "bowl", "camera", "can", "laptop", "mug")

DATASET_FORMAT = "clipose-dataset"
DATASET_VERSION = 1


# ---------------------------------------------------------------------------
# surface primitives

class _Surface:
    """Union of area-weighted surface patches with an exact bounding box."""

    def __init__(self):
        self.parts: list[tuple[float, Callable[[np.random.Generator, int], np.ndarray]]] = []
        self.lo = np.full(3, np.inf)
        self.hi = np.full(3, -np.inf)

    def add(self, area, sampler, lo, hi):
        self.parts.append((float(area), sampler))
        self.lo = np.minimum(self.lo, lo)
        self.hi = np.maximum(self.hi, hi)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        areas = np.array([a for a, _ in self.parts])
        counts = rng.multinomial(n, areas / areas.sum())
        pts = np.concatenate([s(rng, c) for (_, s), c in zip(self.parts, counts)], axis=0)
        pts = pts[rng.permutation(n)]
        center = (self.lo + self.hi) / 2
        return pts - center, self.hi - self.lo

    # -- primitives, all with the y axis as the local axis --

    def cylinder_side(self, r, y0, y1, offset=(0, 0, 0)):
        off = np.asarray(offset, float)

        def s(rng, n):
            phi = rng.uniform(0, 2 * np.pi, n)
            y = rng.uniform(y0, y1, n)
            return np.stack([r * np.cos(phi), y, r * np.sin(phi)], 1) + off

        self.add(2 * np.pi * r * (y1 - y0), s, off + [-r, y0, -r], off + [r, y1, r])

    def disk(self, r_in, r_out, y, offset=(0, 0, 0)):
        off = np.asarray(offset, float)

        def s(rng, n):
            phi = rng.uniform(0, 2 * np.pi, n)
            rad = np.sqrt(rng.uniform(r_in**2, r_out**2, n))
            return np.stack([rad * np.cos(phi), np.full(n, y), rad * np.sin(phi)], 1) + off

        self.add(np.pi * (r_out**2 - r_in**2), s, off + [-r_out, y, -r_out], off + [r_out, y, r_out])

    def spherical_zone(self, R, y0, y1):
        """Zone of a sphere (centre at origin) between heights y0 < y1."""
        # Archimedes: area-uniform on a sphere <=> height-uniform
        def s(rng, n):
            y = rng.uniform(y0, y1, n)
            phi = rng.uniform(0, 2 * np.pi, n)
            rad = np.sqrt(np.maximum(R**2 - y**2, 0.0))
            return np.stack([rad * np.cos(phi), y, rad * np.sin(phi)], 1)

        rmax = R if y0 <= 0 <= y1 else np.sqrt(R**2 - min(y0**2, y1**2))
        self.add(2 * np.pi * R * (y1 - y0), s, [-rmax, y0, -rmax], [rmax, y1, rmax])

    def box(self, size, center=(0, 0, 0), rot=None):
        size = np.asarray(size, float)
        center = np.asarray(center, float)
        rot = np.eye(3) if rot is None else np.asarray(rot, float)
        faces = []
        for ax in range(3):
            u, v = [a for a in range(3) if a != ax]
            for sign in (-1.0, 1.0):
                faces.append((size[u] * size[v], ax, u, v, sign))
        areas = np.array([f[0] for f in faces])

        def s(rng, n):
            idx = rng.choice(len(faces), size=n, p=areas / areas.sum())
            pts = rng.uniform(-0.5, 0.5, (n, 3)) * size
            for i, (_, ax, _, _, sign) in enumerate(faces):
                pts[idx == i, ax] = sign * size[ax] / 2
            return pts @ rot.T + center

        corners = np.array(np.meshgrid([-.5, .5], [-.5, .5], [-.5, .5])).reshape(3, -1).T * size
        corners = corners @ rot.T + center
        self.add(areas.sum(), s, corners.min(0), corners.max(0))

    def torus_arc(self, R, r, center, phi0, phi1):
        """Torus tube in the xy plane; phi measured from +x towards +y."""
        center = np.asarray(center, float)

        def s(rng, n):
            out = np.empty((0, 3))
            while len(out) < n:
                m = 2 * (n - len(out)) + 8
                phi = rng.uniform(phi0, phi1, m)
                psi = rng.uniform(0, 2 * np.pi, m)
                keep = rng.uniform(0, 1, m) < (R + r * np.cos(psi)) / (R + r)
                phi, psi = phi[keep], psi[keep]
                rho = R + r * np.cos(psi)
                pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), r * np.sin(psi)], 1)
                out = np.concatenate([out, pts + center])
            return out[:n]

        # conservative-but-exact box for phi in [-pi/2, pi/2]
        lo = center + [0.0 if phi0 >= -np.pi / 2 and phi1 <= np.pi / 2 else -(R + r), -(R + r), -r]
        hi = center + [R + r, R + r, r]
        self.add((phi1 - phi0) * R * 2 * np.pi * r, s, lo, hi)


def _bottle(p, s: _Surface):
    r, hb, rn, hn = p["radius"], p["body_height"], p["radius"] * p["neck_ratio"], p["neck_height"]
    s.cylinder_side(r, 0.0, hb)
    s.disk(0.0, r, 0.0)
    s.disk(rn, r, hb)
    s.cylinder_side(rn, hb, hb + hn)
    s.disk(0.0, rn, hb + hn)


def _bowl(p, s: _Surface):
    R = p["radius"]
    s.spherical_zone(R, -R, -R + p["depth_ratio"] * R)


def _can(p, s: _Surface):
    r, h = p["radius"], p["height"]
    lip, inset = 0.1 * r, 0.008
    s.cylinder_side(r, 0.0, h)
    s.disk(0.0, r, 0.0)
    # recessed lid inside a rim, so top and bottom differ
    s.disk(r - lip, r, h)
    s.cylinder_side(r - lip, h - inset, h)
    s.disk(0.0, r - lip, h - inset)


def _camera(p, s: _Surface):
    w, h, d = p["width"], p["height"], p["depth"]
    s.box((w, h, d))
    lr, ll = p["lens_ratio"] * h, p["lens_length"]
    # lens barrel along +z (front), flash housing on top (+y)
    lens = _Surface()
    lens.cylinder_side(lr, 0.0, ll)
    lens.disk(0.0, lr, ll)
    to_z = axis_angle_matrix((1, 0, 0), np.pi / 2)
    for area, sampler in lens.parts:
        s.add(area, (lambda f: lambda rng, n: f(rng, n) @ to_z.T + [0.0, 0.0, d / 2])(sampler),
              [-lr, -lr, d / 2], [lr, lr, d / 2 + ll])
    fh = p["flash_height"]
    s.box((0.3 * w, fh, 0.6 * d), center=(0.0, h / 2 + fh / 2, 0.0))


def _laptop(p, s: _Surface):
    w, dd, tb = p["width"], p["depth"], 0.015
    s.box((w, tb, dd), center=(0, tb / 2, 0))
    hs, ts = p["screen_ratio"] * dd, 0.008
    a = np.radians(p["open_deg"])
    # screen hinged on the back edge (z = -dd/2), tilting back past vertical
    rot = axis_angle_matrix((1, 0, 0), -a)  # maps +z (towards the front) to the screen direction
    direction = rot @ np.array([0.0, 0.0, 1.0])
    hinge = np.array([0.0, tb, -dd / 2])
    s.box((w, ts, hs), center=hinge + direction * hs / 2, rot=rot)


def _mug(p, s: _Surface):
    r, h = p["radius"], p["height"]
    s.cylinder_side(r, 0.0, h)
    s.disk(0.0, r, 0.0)
    R = p["handle_ratio"] * h
    s.torus_arc(R, 0.007, (r, h / 2, 0.0), -np.pi / 2, np.pi / 2)


@dataclass(frozen=True)
class CategorySpec:
    name: str
    symmetry: SymmetrySpec
    shape_params: dict
    builder: Callable = field(repr=False, compare=False, default=None)

    @property
    def category_id(self) -> int:
        return CATEGORY_NAMES.index(self.name)

    @property
    def mean_scale(self) -> np.ndarray:
        """Nominal size at the midpoint of every shape-parameter range."""
        surf = self.build({k: (lo + hi) / 2 for k, (lo, hi) in self.shape_params.items()})
        return surf.hi - surf.lo

    def build(self, params: dict) -> _Surface:
        s = _Surface()
        self.builder(params, s)
        return s

    def sample_params(self, rng: np.random.Generator) -> dict:
        return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in sorted(self.shape_params.items())}


CATEGORIES: dict[str, CategorySpec] = {
    "bottle": CategorySpec(
        "bottle", SymmetrySpec("rotational", (0, 1, 0)),
        {"radius": (0.03, 0.045), "body_height": (0.12, 0.18), "neck_ratio": (0.3, 0.45),
         "neck_height": (0.03, 0.06)}, _bottle),
    "bowl": CategorySpec(
        "bowl", SymmetrySpec("rotational", (0, 1, 0)),
        {"radius": (0.07, 0.10), "depth_ratio": (0.5, 0.75)}, _bowl),
    "camera": CategorySpec(
        "camera", SymmetrySpec("none"),
        {"width": (0.10, 0.14), "height": (0.06, 0.09), "depth": (0.04, 0.06),
         "lens_ratio": (0.30, 0.40), "lens_length": (0.04, 0.07), "flash_height": (0.015, 0.025)},
        _camera),
    "can": CategorySpec(
        "can", SymmetrySpec("rotational", (0, 1, 0)),
        {"radius": (0.03, 0.045), "height": (0.08, 0.14)}, _can),
    "laptop": CategorySpec(
        "laptop", SymmetrySpec("reflectional", (1, 0, 0)),
        {"width": (0.28, 0.36), "depth": (0.20, 0.26), "screen_ratio": (0.9, 1.0),
         "open_deg": (95.0, 125.0)}, _laptop),
    "mug": CategorySpec(
        "mug", SymmetrySpec("reflectional", (0, 0, 1)),
        {"radius": (0.04, 0.05), "height": (0.08, 0.11), "handle_ratio": (0.25, 0.32)}, _mug),
}


def category(name_or_id) -> CategorySpec:
    if isinstance(name_or_id, (int, np.integer)):
        return CATEGORIES[CATEGORY_NAMES[int(name_or_id)]]
    try:
        return CATEGORIES[name_or_id]
    except KeyError:
        raise ValueError(f"unknown category {name_or_id!r}") from None


def generate_instance(cat: CategorySpec, rng_seed, n_points: int = 4096):
    """Sample a random shape of ``cat`` and ``n_points`` points on its surface.

    Returns ``(points, scale)``; points are centred on the tight bounding box
    whose extents are ``scale``.
    """
    cat = category(cat) if not isinstance(cat, CategorySpec) else cat
    rng = np.random.default_rng(rng_seed)
    surf = cat.build(cat.sample_params(rng))
    return surf.sample(rng, n_points)


# ---------------------------------------------------------------------------
# text

_TRAIN_TEMPLATE = ("a point cloud model of a {cls} whose rotation euler angles is "
                   "<{e[0]:.2f}, {e[1]:.2f}, {e[2]:.2f}> and translation is "
                   "<{t[0]:.2f}, {t[1]:.2f}, {t[2]:.2f}>.")
_INFER_TEMPLATE = "a point cloud model of a {cls} whose pose is to be estimated."
_NUM = r"(-?\d+\.\d+)"
_TRAIN_RE = re.compile(
    r"a point cloud model of a (\w+) whose rotation euler angles is "
    rf"<{_NUM}, {_NUM}, {_NUM}> and translation is <{_NUM}, {_NUM}, {_NUM}>\.")


def make_text(category_name: str, mode: str = "train", euler_deg=None, t_cm=None) -> str:
    if category_name not in CATEGORIES:
        raise ValueError(f"unknown category {category_name!r}")
    if mode == "infer":
        return _INFER_TEMPLATE.format(cls=category_name)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    e = np.asarray(euler_deg, dtype=np.float64)
    t = np.asarray(t_cm, dtype=np.float64)
    if e.shape != (3,) or t.shape != (3,) or not (np.all(np.isfinite(e)) and np.all(np.isfinite(t))):
        raise ValueError("train-mode text needs finite 3-vectors for euler angles and translation")
    # avoid printing "-0.00"
    e = np.where(np.abs(e) < 0.005, 0.0, e)
    t = np.where(np.abs(t) < 0.005, 0.0, t)
    return _TRAIN_TEMPLATE.format(cls=category_name, e=e, t=t)


def parse_text(s: str):
    """Inverse of train-mode :func:`make_text`: ``(name, euler_deg, t_cm)``."""
    m = _TRAIN_RE.fullmatch(s)
    if m is None:
        raise ValueError(f"not a train-mode description: {s!r}")
    vals = np.array([float(x) for x in m.groups()[1:]])
    return m.group(1), vals[:3], vals[3:]


EULER_SEQ = "xyz"


def pose_text(category_name: str, pose: Pose) -> str:
    euler = Rotation.from_matrix(pose.R).as_euler(EULER_SEQ, degrees=True)
    return make_text(category_name, "train", euler, 100.0 * pose.t)


# ---------------------------------------------------------------------------
# triplets

DEFAULT_INTRINSICS = CameraIntrinsics(577.5, 577.5, 319.5, 239.5)


@dataclass
class DataConfig:
    n_points: int = 256
    patch_size: int = 32
    dense_points: int = 4096
    depth_noise: float = 0.002
    self_occlusion: bool = False
    occlusion_grid: int = 48
    occlusion_tol: float = 0.01
    z_range: tuple = (0.6, 1.2)
    xy_fraction: tuple = (0.3, 0.2)
    intrinsics: tuple = (577.5, 577.5, 319.5, 239.5)
    max_retries: int = 5

    @classmethod
    def paper_scale(cls) -> "DataConfig":
        return cls(n_points=1024, patch_size=224, dense_points=16384)

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(*self.intrinsics)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Triplet:
    points: np.ndarray      # (N, 3) float32, metres, camera frame
    image: np.ndarray       # (P, P, 1) float32 in [0, 1]; 0 = background
    text: str
    category_id: int
    pose: Pose
    intrinsics: CameraIntrinsics

    @property
    def category_name(self) -> str:
        return CATEGORY_NAMES[self.category_id]

    def replace(self, **kw) -> "Triplet":
        return dataclasses.replace(self, **kw)


class GenerationError(RuntimeError):
    pass


def render_patch(points: np.ndarray, C: CameraIntrinsics, size: int) -> np.ndarray:
    """Depth + silhouette patch of a posed point set.

    The object's projected bounding square (10% margin) is resampled to
    ``size`` x ``size``; foreground pixels hold ``1 - 0.8 * relative depth``
    (nearest = 1.0, farthest = 0.2), background is 0.
    """
    uv = project(points, C)
    lo, hi = uv.min(0), uv.max(0)
    side = max(hi - lo) * 1.1 + 1e-9
    origin = (lo + hi) / 2 - side / 2
    pix = np.floor((uv - origin) / side * size).astype(np.int64)
    pix = np.clip(pix, 0, size - 1)
    flat = pix[:, 1] * size + pix[:, 0]
    z = points[:, 2]
    zbuf = np.full(size * size, np.inf)
    np.minimum.at(zbuf, flat, z)
    zbuf = zbuf.reshape(size, size)
    # close splatting gaps: empty pixels with >= 5 of 8 filled neighbours take their nearest depth
    hit = np.isfinite(zbuf)
    n_hit = ndimage.convolve(hit.astype(np.int64), np.ones((3, 3), np.int64), mode="constant") - hit
    fill = ~hit & (n_hit >= 5)
    zbuf[fill] = ndimage.minimum_filter(zbuf, size=3, mode="constant", cval=np.inf)[fill]
    # pixels that only caught back-surface points sit well behind their neighbourhood
    med = ndimage.median_filter(zbuf, size=3, mode="constant", cval=np.inf)
    behind = np.isfinite(med) & (zbuf > med + 0.01)
    zbuf[behind] = med[behind]
    hit = np.isfinite(zbuf)
    img = np.zeros((size, size))
    zn, zf = z.min(), z.max()
    img[hit] = 1.0 - 0.8 * (zbuf[hit] - zn) / (zf - zn + 1e-9)
    return img.reshape(size, size, 1).astype(np.float32)


def _visible_mask(points: np.ndarray, C: CameraIntrinsics, grid: int, tol: float) -> np.ndarray:
    uv = project(points, C)
    lo, hi = uv.min(0), uv.max(0)
    side = max(hi - lo) * 1.01 + 1e-9
    pix = np.clip(np.floor((uv - lo) / side * grid).astype(np.int64), 0, grid - 1)
    flat = pix[:, 1] * grid + pix[:, 0]
    zbuf = np.full(grid * grid, np.inf)
    np.minimum.at(zbuf, flat, points[:, 2])
    return points[:, 2] <= zbuf[flat] + tol


def sample_pose(rng: np.random.Generator, cfg: DataConfig) -> tuple[np.ndarray, np.ndarray]:
    R = Rotation.random(random_state=rng).as_matrix()
    z = rng.uniform(*cfg.z_range)
    x = rng.uniform(-1, 1) * cfg.xy_fraction[0] * z
    y = rng.uniform(-1, 1) * cfg.xy_fraction[1] * z
    return R, np.array([x, y, z])


def make_triplet(cat: CategorySpec, rng_seed, config: DataConfig | None = None) -> Triplet:
    cat = category(cat) if not isinstance(cat, CategorySpec) else cat
    cfg = config or DataConfig()
    C = cfg.camera()
    seq = np.random.SeedSequence(rng_seed) if not isinstance(rng_seed, np.random.SeedSequence) else rng_seed
    for attempt_seq in seq.spawn(cfg.max_retries):
        rng = np.random.default_rng(attempt_seq)
        canonical, scale = generate_instance(cat, rng.integers(2**63), cfg.dense_points)
        R, t = sample_pose(rng, cfg)
        posed = canonical @ R.T + t
        if cfg.self_occlusion:
            candidates = np.flatnonzero(_visible_mask(posed, C, cfg.occlusion_grid, cfg.occlusion_tol))
        else:
            candidates = np.arange(len(posed))
        if len(candidates) < cfg.n_points or np.any(posed[:, 2] <= 0):
            continue
        idx = rng.choice(candidates, size=cfg.n_points, replace=False)
        pts = posed[idx]
        if cfg.depth_noise > 0:
            # noise along the viewing ray keeps |displacement| <= depth_noise
            ray = pts / np.linalg.norm(pts, axis=1, keepdims=True)
            pts = pts + ray * rng.uniform(-cfg.depth_noise, cfg.depth_noise, (len(pts), 1))
        pose = Pose(R, t, scale)
        return Triplet(
            points=pts.astype(np.float32),
            image=render_patch(posed, C, cfg.patch_size),
            text=pose_text(cat.name, pose),
            category_id=cat.category_id,
            pose=pose,
            intrinsics=C,
        )
    raise GenerationError(
        f"{cat.name}: fewer than {cfg.n_points} visible points after {cfg.max_retries} attempts")


def generate_split(n_per_category: int, seed, config: DataConfig | None = None,
                   split: str = "train") -> list[Triplet]:
    """Category-balanced list of triplets, a pure function of (config, seed, split)."""
    cfg = config or DataConfig()
    tag = zlib.crc32(split.encode())
    return [make_triplet(CATEGORIES[name], [int(seed), tag, c, i], cfg)
            for i in range(n_per_category) for c, name in enumerate(CATEGORY_NAMES)]


def category_mean_scales(samples: Iterable[Triplet]) -> np.ndarray:
    """(6, 3) per-category mean bounding-box size; categories absent -> registry nominal."""
    sums = np.zeros((len(CATEGORY_NAMES), 3))
    counts = np.zeros(len(CATEGORY_NAMES))
    for s in samples:
        sums[s.category_id] += s.pose.s
        counts[s.category_id] += 1
    out = np.stack([CATEGORIES[n].mean_scale for n in CATEGORY_NAMES])
    have = counts > 0
    out[have] = sums[have] / counts[have, None]
    return out


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentConfig:
    noise: float = 0.002        # radius of per-point uniform noise ball, m
    max_rot_deg: float = 5.0
    max_trans: float = 0.01     # m, per axis
    scale_jitter: float = 0.1   # per-axis factor in [1 - j, 1 + j]

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


def _ball(rng, n, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius * rng.uniform(0, 1, (n, 1)) ** (1 / 3)


def rigid_perturbation(rng: np.random.Generator, cfg: AugmentConfig):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    dR = axis_angle_matrix(axis, np.radians(rng.uniform(0, cfg.max_rot_deg)))
    dt = rng.uniform(-cfg.max_trans, cfg.max_trans, 3)
    return dR, dt


def augment(t: Triplet, rng_seed, config: AugmentConfig | None = None) -> Triplet:
    """Noise, rigid and box-scale perturbation; the pose label follows the points.

    The rigid perturbation rotates about the object centre. The image patch is
    left untouched.
    """
    cfg = config or AugmentConfig()
    rng = np.random.default_rng(rng_seed)
    pts = t.points.astype(np.float64)
    R, tr, s = t.pose.R, t.pose.t, t.pose.s
    changed = False
    if cfg.max_rot_deg > 0 or cfg.max_trans > 0:
        dR, dt = rigid_perturbation(rng, cfg)
        pts = (pts - tr) @ dR.T + tr + dt
        R, tr = dR @ R, tr + dt
        changed = True
    if cfg.scale_jitter > 0:
        k = rng.uniform(1 - cfg.scale_jitter, 1 + cfg.scale_jitter, 3)
        local = (pts - tr) @ R
        pts = (local * k) @ R.T + tr
        s = s * k
        changed = True
    if cfg.noise > 0:
        pts = pts + _ball(rng, len(pts), cfg.noise)
        changed = True
    if not changed:
        return t.replace(points=t.points.copy())
    pose = Pose(R, tr, s)
    text = t.text
    if not text.endswith("to be estimated."):
        text = pose_text(t.category_name, pose)
    return t.replace(points=pts.astype(np.float32), pose=pose, text=text)


# ---------------------------------------------------------------------------
# dataset files

class DatasetError(Exception):
    """Base class for dataset file problems."""


class VersionMismatchError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    pass


class ChecksumError(DatasetError):
    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


@dataclass
class DatasetManifest:
    version: int
    seed: int | None
    config: dict
    entries: list[dict]
    blobs: dict
    category_mean_scale: list | None = None

    def to_dict(self) -> dict:
        return {"format": DATASET_FORMAT, **dataclasses.asdict(self)}


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: list[Triplet]

    def __iter__(self) -> Iterator[Triplet]:
        return iter(self.samples)

    def __len__(self):
        return len(self.samples)

    def split(self, name: str) -> list[Triplet]:
        return [s for s, e in zip(self.samples, self.manifest.entries) if e["split"] == name]


def _f32le(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def write_dataset(samples, path, seed: int | None = None, config: dict | None = None) -> DatasetManifest:
    """Write ``samples`` (a list, or a mapping split -> list) under directory ``path``.

    Layout: ``manifest.json`` plus one ``<split>.bin`` per split holding, per
    sample, the points then the image as little-endian float32, row-major.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    splits = samples if isinstance(samples, dict) else {"all": list(samples)}
    entries, blobs = [], {}
    train_like = []
    for split, items in splits.items():
        fname = f"{split}.bin"
        buf = bytearray()
        for i, s in enumerate(items):
            payload = _f32le(s.points) + _f32le(s.image)
            entries.append({
                "id": f"{split}/{i}",
                "split": split,
                "blob": fname,
                "offset": len(buf),
                "nbytes": len(payload),
                "crc32": zlib.crc32(payload),
                "points_shape": list(s.points.shape),
                "image_shape": list(s.image.shape),
                "category_id": int(s.category_id),
                "text": s.text,
                "pose": {"R": s.pose.R.ravel().tolist(), "t": s.pose.t.tolist(), "s": s.pose.s.tolist()},
                "intrinsics": [s.intrinsics.fx, s.intrinsics.fy, s.intrinsics.cx, s.intrinsics.cy],
            })
            buf += payload
        (path / fname).write_bytes(bytes(buf))
        blobs[fname] = {"nbytes": len(buf), "crc32": zlib.crc32(bytes(buf))}
        if split == "train":
            train_like = items
    ms = category_mean_scales(train_like).tolist() if train_like else None
    manifest = DatasetManifest(DATASET_VERSION, seed, config or {}, entries, blobs, ms)
    with open(path / "manifest.json", "w") as f:
        json.dump(manifest.to_dict(), f, indent=1)
    return manifest


def read_manifest(path) -> DatasetManifest:
    with open(Path(path) / "manifest.json") as f:
        doc = json.load(f)
    if doc.get("format") != DATASET_FORMAT:
        raise VersionMismatchError(f"not a {DATASET_FORMAT} manifest")
    if doc.get("version") != DATASET_VERSION:
        raise VersionMismatchError(f"dataset version {doc.get('version')} != {DATASET_VERSION}")
    doc.pop("format")
    return DatasetManifest(**doc)


def read_dataset(path) -> Dataset:
    path = Path(path)
    manifest = read_manifest(path)
    data = {}
    for fname, meta in manifest.blobs.items():
        raw = (path / fname).read_bytes()
        if len(raw) != meta["nbytes"]:
            raise TruncatedPayloadError(f"{fname}: {len(raw)} bytes on disk, manifest says {meta['nbytes']}")
        data[fname] = raw
    samples = []
    for e in manifest.entries:
        payload = data[e["blob"]][e["offset"]:e["offset"] + e["nbytes"]]
        if len(payload) != e["nbytes"]:
            raise TruncatedPayloadError(f"sample {e['id']}: payload truncated")
        if zlib.crc32(payload) != e["crc32"]:
            raise ChecksumError(f"checksum mismatch in sample {e['id']}", sample=e["id"])
        n_pts = int(np.prod(e["points_shape"])) * 4
        pts = np.frombuffer(payload[:n_pts], dtype="<f4").reshape(e["points_shape"]).astype(np.float32)
        img = np.frombuffer(payload[n_pts:], dtype="<f4").reshape(e["image_shape"]).astype(np.float32)
        p = e["pose"]
        samples.append(Triplet(pts, img, e["text"], e["category_id"],
                               Pose(np.reshape(p["R"], (3, 3)), p["t"], p["s"]),
                               CameraIntrinsics(*e["intrinsics"])))
    for fname, meta in manifest.blobs.items():
        if zlib.crc32(data[fname]) != meta["crc32"]:
            raise ChecksumError(f"blob {fname} checksum mismatch")
    return Dataset(manifest, samples)


def generate_dataset(path, n_train: int, n_test: int, seed: int,
                     config: DataConfig | None = None) -> DatasetManifest:
    cfg = config or DataConfig()
    splits = {"train": generate_split(n_train, seed, cfg, "train"),
              "test": generate_split(n_test, seed, cfg, "test")}
    return write_dataset(splits, path, seed=seed, config=cfg.to_dict())
