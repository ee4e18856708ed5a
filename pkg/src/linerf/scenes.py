"""Analytic test scenes: primitives, shading, shell density fields, cameras.

Ground truth comes from closed-form ray tracing (`gt_radiance`). The same
geometry doubles as a density field for the renderers: a thin shell of width
eps around each surface with sigma = A/eps inside, so a ray crossing the
shell accumulates optical depth A regardless of eps. `AnalyticField` exposes
that shell plus simple features through the renderer's field protocol, which
is how the quadrature oracle and the embedding tests run without any training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ConfigurationError, DataError, InputError
from .field import Background

# Shell amplitude: optical depth through a perpendicular crossing. Twice
# ln(1e6) so the quadrature sum still clears alpha >= 1 - 1e-6 after losing
# up to two partial bins at the shell edges.
A_SHELL = 2.0 * math.log(1e6)


# ----------------------------------------------------------------- primitives


@dataclass(frozen=True)
class Material:
    diffuse: tuple
    specular: float = 0.0
    shininess: float = 16.0


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    material: Material


@dataclass(frozen=True)
class Disc:
    """A flat circular plate: plane point + normal, limited to `radius`."""

    center: tuple
    normal: tuple
    radius: float
    material: Material


@dataclass(frozen=True)
class Light:
    direction: tuple       # unit vector pointing from the surface toward the light
    rgb: tuple


@dataclass(frozen=True)
class StripeEnv:
    """Procedural mirror environment: azimuthal color stripes, tanh-smoothed."""

    color_a: tuple
    color_b: tuple
    stripes: int = 4
    softness: float = 0.35

    def color(self, dirs):
        d = np.atleast_2d(dirs)
        az = np.arctan2(d[:, 1], d[:, 0])
        m = 0.5 + 0.5 * np.tanh(np.sin(self.stripes * az) / self.softness)
        a = np.asarray(self.color_a)
        b = np.asarray(self.color_b)
        return a + m[:, None] * (b - a)


@dataclass(frozen=True)
class Scene:
    name: str
    primitives: tuple
    lights: tuple
    background: tuple = (0.62, 0.70, 0.85)
    env: StripeEnv = None

    def __post_init__(self):
        if not self.primitives:
            raise ConfigurationError("scene needs at least one primitive")
        for light in self.lights:
            n = np.linalg.norm(light.direction)
            if abs(n - 1.0) > 1e-6:
                raise ConfigurationError(f"light direction must be unit length, |l| = {n}")
        bg = np.asarray(self.background)
        if bg.shape != (3,) or np.any(bg < 0) or np.any(bg > 1):
            raise ConfigurationError("background must be rgb in [0,1]^3")


def make_matte_scene():
    """Diffuse sphere resting on a diffuse ground disc; no view dependence."""
    return Scene(
        name="matte",
        primitives=(
            Sphere((0.0, 0.0, 0.0), 0.5, Material(diffuse=(0.72, 0.25, 0.20))),
            Disc((0.0, 0.0, -0.5), (0.0, 0.0, 1.0), 1.5, Material(diffuse=(0.35, 0.38, 0.42))),
        ),
        lights=(
            Light(_unit((0.45, 0.25, 0.85)), (0.85, 0.85, 0.85)),
            Light(_unit((-0.55, -0.3, 0.55)), (0.30, 0.30, 0.30)),
        ),
    )


def make_glossy_scene(specular=0.55, shininess=24.0, stripes=4, softness=0.35,
                      plane_specular=0.08, name="glossy"):
    """Same geometry with a strong Phong lobe and a mirror stripe environment."""
    return Scene(
        name=name,
        primitives=(
            Sphere((0.0, 0.0, 0.0), 0.5,
                   Material(diffuse=(0.18, 0.16, 0.15), specular=specular, shininess=shininess)),
            Disc((0.0, 0.0, -0.5), (0.0, 0.0, 1.0), 1.5,
                 Material(diffuse=(0.32, 0.34, 0.38), specular=plane_specular, shininess=8.0)),
        ),
        lights=(
            Light(_unit((0.45, 0.25, 0.85)), (0.85, 0.85, 0.85)),
            Light(_unit((-0.55, -0.3, 0.55)), (0.30, 0.30, 0.30)),
        ),
        env=StripeEnv((0.90, 0.55, 0.15), (0.15, 0.45, 0.90), stripes=stripes, softness=softness),
    )


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return tuple(v / np.linalg.norm(v))


# --------------------------------------------------------------- intersection

_T_MIN = 1e-6


def _intersect_batch(scene, origins, dirs):
    """Nearest hit per ray. Returns (t, prim_index) with t = inf on miss."""
    b = origins.shape[0]
    best_t = np.full(b, np.inf)
    best_i = np.full(b, -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        if isinstance(prim, Sphere):
            oc = origins - np.asarray(prim.center)
            bq = np.einsum("bi,bi->b", oc, dirs)
            cq = np.einsum("bi,bi->b", oc, oc) - prim.radius**2
            disc = bq * bq - cq
            hit = disc >= 0
            sq = np.sqrt(np.where(hit, disc, 0.0))
            t0 = -bq - sq
            t1 = -bq + sq
            t = np.where(t0 > _T_MIN, t0, np.where(t1 > _T_MIN, t1, np.inf))
            t = np.where(hit, t, np.inf)
        elif isinstance(prim, Disc):
            n = np.asarray(prim.normal)
            denom = dirs @ n
            safe = np.abs(denom) > 1e-12
            t = np.where(
                safe, ((np.asarray(prim.center) - origins) @ n) / np.where(safe, denom, 1.0), np.inf
            )
            p = origins + t[:, None] * dirs
            q = p - np.asarray(prim.center)
            lat2 = np.einsum("bi,bi->b", q, q) - (q @ n) ** 2
            t = np.where((t > _T_MIN) & (lat2 <= prim.radius**2), t, np.inf)
        else:
            raise ConfigurationError(f"unknown primitive type {type(prim).__name__}")
        closer = t < best_t
        best_t[closer] = t[closer]
        best_i[closer] = i
    return best_t, best_i


def _normals_at(scene, points, prim_idx):
    normals = np.zeros_like(points)
    for i, prim in enumerate(scene.primitives):
        sel = prim_idx == i
        if not np.any(sel):
            continue
        if isinstance(prim, Sphere):
            v = points[sel] - np.asarray(prim.center)
            normals[sel] = v / np.linalg.norm(v, axis=1, keepdims=True)
        else:
            normals[sel] = np.asarray(prim.normal)
    return normals


def _shade(scene, points, normals, prim_idx, view_dirs):
    """Lambert + Phong + mirror environment, clipped to [0,1]. Vectorized."""
    b = points.shape[0]
    # face the viewer: flip normals pointing away
    flip = np.einsum("bi,bi->b", normals, view_dirs) > 0
    normals = np.where(flip[:, None], -normals, normals)
    diffuse = np.zeros((b, 3))
    spec_str = np.zeros(b)
    shininess = np.ones(b)
    for i, prim in enumerate(scene.primitives):
        sel = prim_idx == i
        diffuse[sel] = np.asarray(prim.material.diffuse)
        spec_str[sel] = prim.material.specular
        shininess[sel] = prim.material.shininess
    refl = view_dirs - 2.0 * np.einsum("bi,bi->b", view_dirs, normals)[:, None] * normals
    rgb = np.zeros((b, 3))
    for light in scene.lights:
        ldir = np.asarray(light.direction)
        lrgb = np.asarray(light.rgb)
        lam = np.maximum(0.0, normals @ ldir)
        rgb += lam[:, None] * diffuse * lrgb
        phong = np.maximum(0.0, refl @ ldir) ** shininess
        rgb += (spec_str * phong)[:, None] * lrgb
    if scene.env is not None:
        rgb += spec_str[:, None] * scene.env.color(refl)
    return np.clip(rgb, 0.0, 1.0)


def gt_radiance_batch(scene, origins, dirs):
    """Closed-form scene radiance for rays (B,3),(B,3) -> rgb (B,3)."""
    t, idx = _intersect_batch(scene, origins, dirs)
    rgb = np.broadcast_to(np.asarray(scene.background), (origins.shape[0], 3)).copy()
    hit = np.isfinite(t)
    if np.any(hit):
        points = origins[hit] + t[hit, None] * dirs[hit]
        normals = _normals_at(scene, points, idx[hit])
        rgb[hit] = _shade(scene, points, normals, idx[hit], dirs[hit])
    return rgb


def gt_radiance(scene, ray):
    """Radiance seen along one ray (any object with origin/direction)."""
    return gt_radiance_batch(
        scene, np.asarray(ray.origin)[None, :], np.asarray(ray.direction)[None, :]
    )[0]


# ------------------------------------------------------------- shell density


def nearest_surface(scene, xs):
    """Distance to the closest surface plus its projection, normal, primitive.

    Returns (dist (B,), proj (B,3), normal (B,3), prim_idx (B,)).
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    b = xs.shape[0]
    best = np.full(b, np.inf)
    proj = np.zeros_like(xs)
    normal = np.zeros_like(xs)
    pidx = np.zeros(b, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        if isinstance(prim, Sphere):
            c = np.asarray(prim.center)
            v = xs - c
            rlen = np.linalg.norm(v, axis=1)
            safe = np.maximum(rlen, 1e-12)
            unit = v / safe[:, None]
            unit[rlen < 1e-12] = (0.0, 0.0, 1.0)
            d = np.abs(rlen - prim.radius)
            p = c + prim.radius * unit
            nrm = unit
        else:
            c = np.asarray(prim.center)
            n = np.asarray(prim.normal)
            q = xs - c
            z = q @ n
            lat = q - z[:, None] * n
            rho = np.linalg.norm(lat, axis=1)
            inside = rho <= prim.radius
            scale = np.where(inside, 1.0, prim.radius / np.maximum(rho, 1e-12))
            p = c + lat * scale[:, None]
            d = np.where(inside, np.abs(z), np.sqrt(z**2 + (rho - prim.radius) ** 2))
            nrm = np.broadcast_to(n, xs.shape)
        closer = d < best
        best[closer] = d[closer]
        proj[closer] = p[closer]
        normal[closer] = nrm[closer]
        pidx[closer] = i
    return best, proj, normal, pidx


def analytic_density(scene, eps, xs, amplitude=A_SHELL):
    """Shell density: amplitude/eps within eps/2 of a surface, zero elsewhere."""
    if eps <= 0:
        raise InputError(f"shell width must be positive, got {eps}")
    dist, _, _, _ = nearest_surface(scene, xs)
    sigma = np.where(dist < eps / 2.0, amplitude / eps, 0.0)
    return sigma if np.asarray(xs).ndim > 1 else float(sigma[0])


@dataclass
class AnalyticField:
    """Shell-density field over a scene, usable directly by the renderers.

    feature_mode "identity" makes h(x) = x and the decoder shades from the
    projected surface point; "shading" carries [projected point, normal].
    """

    scene: Scene
    eps: float = 0.01
    feature_mode: str = "identity"
    amplitude: float = A_SHELL
    background: Background = None

    def __post_init__(self):
        if self.feature_mode not in ("identity", "shading"):
            raise ConfigurationError(f"unknown feature mode {self.feature_mode!r}")
        if self.background is None:
            self.background = Background(rgb=np.asarray(self.scene.background))

    @property
    def feature_dim(self):
        return 3 if self.feature_mode == "identity" else 6

    def query(self, xs):
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        sigma = analytic_density(self.scene, self.eps, xs, self.amplitude)
        if self.feature_mode == "identity":
            return xs.copy(), sigma
        _, proj, normal, _ = nearest_surface(self.scene, xs)
        return np.concatenate([proj, normal], axis=1), sigma

    def decode_color(self, feats, dirs):
        """Shade from positional features; the test-hook decoder for oracles."""
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        if dirs.shape[0] == 1 and feats.shape[0] > 1:
            dirs = np.broadcast_to(dirs, (feats.shape[0], 3))
        if self.feature_mode == "identity":
            _, proj, normal, pidx = nearest_surface(self.scene, feats)
        else:
            proj, normal = feats[:, :3], feats[:, 3:]
            norms = np.linalg.norm(normal, axis=1, keepdims=True)
            normal = normal / np.maximum(norms, 1e-12)
            _, _, _, pidx = nearest_surface(self.scene, proj)
        return _shade(self.scene, proj, normal, pidx, dirs)


@dataclass
class DiracDensityField:
    """Features/decoder from `inner`, density an effectively one-hot shell.

    The shell is so thin and dense (sigma*delta overflows exp) that exactly
    one sample per crossing takes weight 1.0 in float64, which makes the
    classic/integrated estimators provably identical on these rays.
    """

    inner: object
    scene: Scene
    eps: float = 1e-6
    amplitude: float = 1e4

    @property
    def background(self):
        return self.inner.background

    def query(self, xs):
        feats, _ = self.inner.query(xs)
        sigma = analytic_density(self.scene, self.eps, xs, self.amplitude)
        return feats, sigma

    def decode_color(self, feats, dirs):
        return self.inner.decode_color(feats, dirs)


# -------------------------------------------------------------------- cameras


@dataclass
class Camera:
    """Camera-to-world pose, looking down -z, x right, y up (Blender style)."""

    c2w: np.ndarray
    width: int
    height: int
    camera_angle_x: float

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise DataError(f"camera pose must be 4x4, got {self.c2w.shape}")
        rot = self.c2w[:3, :3]
        err = np.max(np.abs(rot.T @ rot - np.eye(3)))
        if err > 1e-6:
            raise DataError(f"camera rotation not orthonormal (error {err:.2e})")
        if np.max(np.abs(self.c2w[3] - np.array([0, 0, 0, 1.0]))) > 1e-9:
            raise DataError("camera pose bottom row must be [0,0,0,1]")
        if self.width < 1 or self.height < 1:
            raise DataError("camera resolution must be positive")
        if not 0.0 < self.camera_angle_x < np.pi:
            raise DataError(f"camera_angle_x {self.camera_angle_x} outside (0, pi)")

    @property
    def focal(self):
        return 0.5 * self.width / np.tan(0.5 * self.camera_angle_x)


def camera_rays(camera, offset=(0.5, 0.5)):
    """World-space rays through every pixel at subpixel `offset` (col, row).

    Returns (origins (H*W,3), dirs (H*W,3)) in row-major pixel order.
    """
    w, h, f = camera.width, camera.height, camera.focal
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    px = cols.ravel() + offset[0]
    py = rows.ravel() + offset[1]
    cam_dirs = np.stack(
        [(px - 0.5 * w) / f, -(py - 0.5 * h) / f, -np.ones(w * h)], axis=1
    )
    world = cam_dirs @ camera.c2w[:3, :3].T
    world /= np.linalg.norm(world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.c2w[:3, 3], (w * h, 3)).copy()
    return origins, world


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix for an eye point looking at a target."""
    eye = np.asarray(eye, dtype=np.float64)
    zc = eye - np.asarray(target, dtype=np.float64)
    zc = zc / np.linalg.norm(zc)
    xc = np.cross(np.asarray(up, dtype=np.float64), zc)
    n = np.linalg.norm(xc)
    if n < 1e-9:
        raise ConfigurationError("look_at degenerate: view direction parallel to up")
    xc /= n
    yc = np.cross(zc, xc)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = xc, yc, zc, eye
    return m


def train_poses(n, radius, rng, elevation_range=(8.0, 62.0)):
    """Seeded uniform placement on a spherical band, looking at the origin."""
    lo, hi = (math.radians(a) for a in elevation_range)
    s = rng.uniform(math.sin(lo), math.sin(hi), size=n)
    elev = np.arcsin(s)
    az = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return [_pose_at(radius, a, e) for a, e in zip(az, elev)]


def test_poses(n, radius, elevation_deg=30.0):
    """Fixed ring of evenly spaced azimuths; independent of any seed."""
    elev = math.radians(elevation_deg)
    return [
        _pose_at(radius, (i + 0.5) * 2.0 * np.pi / n, elev) for i in range(n)
    ]


def _pose_at(radius, azimuth, elevation):
    eye = radius * np.array(
        [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)]
    )
    return look_at(eye)


# ----------------------------------------------------------- dataset generation

SCENES = {"matte": make_matte_scene, "glossy": make_glossy_scene}

DEFAULT_CAMERA_ANGLE_X = 0.8575560718
DEFAULT_RADIUS = 3.5
DEFAULT_NEAR = 1.6
DEFAULT_FAR = 5.6


def gen_dataset(scene, out_dir, n_train=30, n_test=10, resolution=64, seed=0,
                supersample=2, radius=DEFAULT_RADIUS, camera_angle_x=DEFAULT_CAMERA_ANGLE_X,
                near=DEFAULT_NEAR, far=DEFAULT_FAR, image_format="ppm"):
    """Render and write a dataset directory in the common transforms layout.

    Train poses are seeded; test poses are a fixed ring. Images are rendered
    with supersample^2 rays per pixel, averaged in linear rgb. Byte-identical
    across runs with the same arguments.
    """
    from pathlib import Path

    from . import data as data_mod

    if n_train < 1 or n_test < 1:
        raise ConfigurationError("need at least one train and one test view")
    if resolution < 1 or supersample < 1:
        raise ConfigurationError("resolution and supersample must be positive")
    out = Path(out_dir)
    rng = np.random.Generator(np.random.PCG64(seed))
    poses = {
        "train": train_poses(n_train, radius, rng),
        "test": test_poses(n_test, radius),
    }
    offsets = [
        ((i + 0.5) / supersample, (j + 0.5) / supersample)
        for j in range(supersample) for i in range(supersample)
    ]
    for split, split_poses in poses.items():
        (out / split).mkdir(parents=True, exist_ok=True)
        frames = []
        for vi, pose in enumerate(split_poses):
            cam = Camera(pose, resolution, resolution, camera_angle_x)
            acc = np.zeros((resolution * resolution, 3))
            for off in offsets:
                origins, dirs = camera_rays(cam, offset=off)
                acc += gt_radiance_batch(scene, origins, dirs)
            img = data_mod.Image(
                (acc / len(offsets)).reshape(resolution, resolution, 3)
            )
            rel = f"./{split}/r_{vi:03d}"
            data_mod.write_image(out / split / f"r_{vi:03d}.{image_format}", img)
            frames.append({"file_path": rel, "transform_matrix": pose.tolist()})
        meta = {
            "camera_angle_x": camera_angle_x,
            "near": near,
            "far": far,
            "scene": scene.name,
            "seed": seed,
            "resolution": resolution,
            "background": list(scene.background),
            "frames": frames,
        }
        data_mod.write_json(out / f"transforms_{split}.json", meta)
    return out
