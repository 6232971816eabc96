"""Synthetic paired 2D/3D identity data with controlled pose.

Each identity is a smooth random relief surface sampled as a point cloud:
planform positions in the unit disk, heights from a sum of random Gaussian
bumps, analytic surface normals, and a smooth albedo pattern in (0, 1].
Images are rendered by rotating the cloud about the vertical axis and
shading with a fixed directional light, I = albedo * max(0, normal . light),
splatted orthographically with a depth buffer. The stored cloud stays in the
canonical frontal pose (plus per-sample expression jitter), so the 3D channel
is pose-invariant while the image degrades with yaw through shading and
self-occlusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datafiles

POSE_BINS = ("0-10", "10-30", "30-60", "60-90", "90+")
_BIN_EDGES = (0.0, 10.0, 30.0, 60.0, 90.0, 120.0)
GALLERY_SIZE = 5


def pose_bin(yaw: float) -> str:
    for name, lo, hi in zip(POSE_BINS, _BIN_EDGES, _BIN_EDGES[1:]):
        if lo <= yaw < hi:
            return name
    if yaw == _BIN_EDGES[-1]:
        return POSE_BINS[-1]
    raise ValueError(f"yaw {yaw} outside [0, 120]")


@dataclass
class IdentityConstellation:
    points: np.ndarray  # (N, 3) canonical frontal pose, unit-sphere normalized
    normals: np.ndarray  # (N, 3) unit length
    albedo: np.ndarray  # (N,) in (0, 1]
    identity: int


@dataclass(frozen=True)
class SurfaceParams:
    """Analytic identity surface: warped planform plus Gaussian relief bumps."""

    centers: np.ndarray
    heights: np.ndarray
    widths: np.ndarray
    spiral_offset: float
    stretch_x: float
    stretch_y: float
    radial_exp: float
    scale: float  # unit-sphere normalization factor of the canonical cloud
    centroid: np.ndarray


@dataclass(frozen=True)
class GeneratorConfig:
    identities: int = 40
    samples_per_identity: int = 25
    points: int = 256
    image_hw: int = 32
    bumps: int = 5
    bump_height: float = 0.75
    render_points: int = 2048  # dense surface resampling for image synthesis
    image_noise: float = 0.05  # additive sensor noise on rendered images
    jitter_scale: float = 0.02
    pose_fractions: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    train_fraction: float = 0.7
    light: tuple = (0.25, 0.25, 0.93)
    max_yaw: float = 100.0  # upper end of the 90+ bin during generation

    def __post_init__(self):
        if len(self.pose_fractions) != len(POSE_BINS):
            raise ValueError("pose_fractions must cover the five bins")
        if abs(sum(self.pose_fractions) - 1.0) > 1e-9:
            raise ValueError("pose_fractions must sum to 1")
        if self.samples_per_identity <= GALLERY_SIZE:
            raise ValueError(
                f"need more than {GALLERY_SIZE} samples per identity "
                "(gallery takes 5)"
            )


def _id_rng(seed: int, identity: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, identity, stream]))


def surface_params(seed: int, identity: int, cfg: GeneratorConfig) -> SurfaceParams:
    """Deterministic identity surface parameters for (seed, identity)."""
    rng = _id_rng(seed, identity)
    radial_exp = rng.uniform(0.7, 1.4)
    spiral_offset = rng.uniform(0, 2 * np.pi)
    stretch_x = rng.uniform(0.7, 1.3)
    stretch_y = rng.uniform(0.7, 1.3)
    centers = rng.uniform(-0.6, 0.6, (cfg.bumps, 2))
    heights = rng.uniform(-1.0, 1.0, cfg.bumps) * cfg.bump_height
    widths = rng.uniform(0.15, 0.45, cfg.bumps)
    params = SurfaceParams(
        centers, heights, widths, spiral_offset, stretch_x, stretch_y,
        radial_exp, scale=1.0, centroid=np.zeros(3),
    )
    # normalization constants come from the canonical cloud so that every
    # sampling density of this surface lands in the same coordinate frame
    pts, _, _ = _sample_surface(params, cfg.points)
    centroid = pts.mean(axis=0)
    scale = float(np.linalg.norm(pts - centroid, axis=1).max())
    return SurfaceParams(
        centers, heights, widths, spiral_offset, stretch_x, stretch_y,
        radial_exp, scale=scale, centroid=centroid,
    )


def _sample_surface(params: SurfaceParams, n: int):
    """Evaluate the surface at n evenly spread planform positions."""
    idx = np.arange(n) + 0.5
    r = np.sqrt(idx / n) ** params.radial_exp
    ang = idx * np.pi * (3.0 - np.sqrt(5.0)) + params.spiral_offset
    x = r * np.cos(ang) * params.stretch_x
    y = r * np.sin(ang) * params.stretch_y

    z = np.zeros(n)
    gx = np.zeros(n)
    gy = np.zeros(n)
    for (cx, cy), hgt, wid in zip(params.centers, params.heights, params.widths):
        d2 = (x - cx) ** 2 + (y - cy) ** 2
        g = hgt * np.exp(-d2 / (2 * wid**2))
        z += g
        gx += g * -(x - cx) / wid**2
        gy += g * -(y - cy) / wid**2

    pts = np.stack([x, y, z], axis=1)
    pts = (pts - params.centroid) / params.scale

    normals = np.stack([-gx, -gy, np.ones(n)], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    albedo = 0.55 + 0.45 / (1.0 + np.exp(-(np.sin(3 * x) + np.cos(3 * y))))
    return pts, normals, albedo


def sample_identity(seed: int, identity: int, cfg: GeneratorConfig) -> IdentityConstellation:
    """Deterministic random relief surface for one identity."""
    params = surface_params(seed, identity, cfg)
    pts, normals, albedo = _sample_surface(params, cfg.points)
    return IdentityConstellation(pts, normals, albedo, identity)


def yaw_matrix(yaw_degrees: float) -> np.ndarray:
    t = np.deg2rad(yaw_degrees)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def pose_view(
    constellation: IdentityConstellation,
    yaw_degrees: float,
    jitter_scale: float = 0.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Rotate the (jittered) canonical cloud about the vertical axis.

    Returns the posed points and identically rotated normals.
    """
    if not 0.0 <= yaw_degrees <= 180.0:
        raise ValueError(f"yaw {yaw_degrees} outside [0, 180]")
    pts = constellation.points
    if jitter_scale > 0:
        rng = np.random.default_rng(seed)
        pts = pts + rng.normal(0.0, jitter_scale, pts.shape)
    rot = yaw_matrix(yaw_degrees)
    return pts @ rot.T, constellation.normals @ rot.T


def render_lambertian(
    points: np.ndarray,
    normals: np.ndarray,
    albedo: np.ndarray,
    light: np.ndarray,
    image_hw: int,
) -> np.ndarray:
    """Depth-buffered orthographic splat shaded as albedo * max(0, N . L).

    The camera looks down -z; larger z wins the depth test. Points whose
    normal faces away from the camera are culled, empty pixels stay 0.
    """
    light = np.asarray(light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shade = albedo * np.maximum(0.0, normals @ light)

    image = np.zeros((image_hw, image_hw))
    half = 1.2  # world extent mapped to the image square
    cols = np.clip(((points[:, 0] + half) / (2 * half) * image_hw).astype(int),
                   0, image_hw - 1)
    rows = np.clip(((half - points[:, 1]) / (2 * half) * image_hw).astype(int),
                   0, image_hw - 1)
    front = np.flatnonzero(normals[:, 2] > 0)
    # paint far-to-near; the nearest point into a pixel writes last
    order = front[np.argsort(points[front, 2], kind="stable")]
    image[rows[order], cols[order]] = shade[order]
    return image[:, :, None]


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two clouds."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).mean() + np.sqrt(d2.min(axis=0)).mean()) / 2


def _allocate_bins(count: int, fractions) -> list[int]:
    """Largest-remainder allocation of `count` probes over the pose bins."""
    raw = np.asarray(fractions) * count
    base = np.floor(raw).astype(int)
    rest = count - base.sum()
    order = np.argsort(-(raw - base))
    for i in range(rest):
        base[order[i]] += 1
    return base.tolist()


@dataclass
class DatasetLayout:
    root: Path
    manifest: Path
    records: list[dict] = field(default_factory=list)


def build_dataset(cfg: GeneratorConfig, out_dir: Path, seed: int) -> DatasetLayout:
    """Generate paired samples and write splits, images, and clouds to disk.

    Identities are split train/eval disjointly; each eval identity gets 5
    near-frontal gallery samples, the rest are probes tagged with pose bins.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)

    split_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD5]))
    ids = split_rng.permutation(cfg.identities)
    n_train = int(round(cfg.identities * cfg.train_fraction))
    train_ids = set(int(i) for i in ids[:n_train])

    light = np.asarray(cfg.light) / np.linalg.norm(cfg.light)
    records = []
    for identity in range(cfg.identities):
        params = surface_params(seed, identity, cfg)
        const = sample_identity(seed, identity, cfg)
        dense_pts, dense_normals, dense_albedo = _sample_surface(
            params, cfg.render_points
        )
        pose_rng = _id_rng(seed, identity, stream=1)
        n_probe = cfg.samples_per_identity - GALLERY_SIZE
        yaws = [float(pose_rng.uniform(0.0, 10.0)) for _ in range(GALLERY_SIZE)]
        roles = ["gallery"] * GALLERY_SIZE
        edges = list(_BIN_EDGES[:-1]) + [cfg.max_yaw]
        for count, (lo, hi) in zip(
            _allocate_bins(n_probe, cfg.pose_fractions), zip(edges, edges[1:])
        ):
            for _ in range(count):
                yaws.append(float(pose_rng.uniform(lo, hi)))
                roles.append("probe")

        for k, (yaw, role) in enumerate(zip(yaws, roles)):
            jitter_seed = int(pose_rng.integers(0, 2**31))
            jrng = np.random.default_rng(jitter_seed)
            jittered = const.points + jrng.normal(
                0.0, cfg.jitter_scale, const.points.shape
            )
            rot = yaw_matrix(yaw)
            dense_posed = (
                dense_pts + jrng.normal(0.0, cfg.jitter_scale, dense_pts.shape)
            ) @ rot.T
            image = render_lambertian(
                dense_posed, dense_normals @ rot.T, dense_albedo, light, cfg.image_hw
            )
            if cfg.image_noise > 0:
                image = np.maximum(
                    image + jrng.normal(0.0, cfg.image_noise, image.shape), 0.0
                )

            img_dir = out_dir / "images" / f"id{identity:04d}"
            cld_dir = out_dir / "clouds" / f"id{identity:04d}"
            img_dir.mkdir(exist_ok=True)
            cld_dir.mkdir(exist_ok=True)
            img_path = img_dir / f"s{k:03d}.img"
            cld_path = cld_dir / f"s{k:03d}.cld"
            datafiles.write_image(img_path, image)
            datafiles.write_cloud(cld_path, jittered)

            records.append(
                {
                    "id": identity,
                    "pose_deg": round(yaw, 4),
                    "bin": pose_bin(yaw),
                    "image_path": str(img_path.relative_to(out_dir)),
                    "cloud_path": str(cld_path.relative_to(out_dir)),
                    "role": role,
                    "split": "train" if identity in train_ids else "eval",
                }
            )

    manifest = out_dir / "manifest.jsonl"
    datafiles.write_manifest(manifest, records)
    return DatasetLayout(out_dir, manifest, records)
