"""Radiance field model: positional/directional encoders, trunk, and heads.

A `FieldModel` maps position -> feature h via an encoder plus MLP trunk,
h -> density via a softplus head, and (feature, direction) -> rgb via a
sigmoid head over the feature concatenated with an encoded view direction.
The feature tap point for ray integration is controlled by `split_index`
(0 = raw positional encoding, trunk depth = full h).
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import net
from .errors import ConfigurationError, FormatError, InputError
from .net import LayerSpec, NetParams, net_forward

_MODEL_MAGIC = b"LFMD"
_MODEL_VERSION = 1

WHITE = np.ones(3)


# ------------------------------------------------------------------- encoders


@dataclass(frozen=True)
class SinusoidalConfig:
    """Per-coordinate sin/cos at frequencies 2^k * pi, k = 0..num_frequencies-1."""

    num_frequencies: int = 10
    include_raw: bool = True
    kind: str = "sinusoidal"

    @property
    def dim(self):
        return 3 * (2 * self.num_frequencies + (1 if self.include_raw else 0))


@dataclass(frozen=True)
class GridConfig:
    """Dense multi-level feature grid with trilinear interpolation.

    Resolutions are cells per side, base_resolution * per_level_scale^level;
    each level stores (cells+1)^3 learned feature vectors. Queries outside the
    box clamp to the boundary.
    """

    num_levels: int = 5
    base_resolution: int = 16
    per_level_scale: float = 1.5
    features_per_level: int = 2
    box_min: tuple = (-1.8, -1.8, -1.8)
    box_max: tuple = (1.8, 1.8, 1.8)
    kind: str = "grid"

    def resolutions(self):
        res = [
            int(round(self.base_resolution * self.per_level_scale**level))
            for level in range(self.num_levels)
        ]
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ConfigurationError(f"grid resolutions must be strictly increasing, got {res}")
        return res

    def level_offsets(self):
        """Row offsets of each level inside the flat vertex table."""
        offsets, total = [], 0
        for r in self.resolutions():
            offsets.append(total)
            total += (r + 1) ** 3
        return offsets, total

    @property
    def dim(self):
        return self.num_levels * self.features_per_level


@dataclass(frozen=True)
class ShConfig:
    """Real spherical harmonics on the view direction, all bands 0..degree."""

    degree: int = 4
    kind: str = "sh"

    def __post_init__(self):
        if not 0 <= self.degree <= 4:
            raise ConfigurationError(f"sh degree {self.degree} outside supported range 0..4")

    @property
    def dim(self):
        return (self.degree + 1) ** 2


def _sinusoidal(cfg, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    freqs = (2.0 ** np.arange(cfg.num_frequencies)) * np.pi
    args = x[:, None, :] * freqs[:, None]          # (B, L, 3)
    parts = np.stack([np.sin(args), np.cos(args)], axis=2)  # (B, L, 2, 3)
    feats = parts.reshape(x.shape[0], -1)
    if cfg.include_raw:
        feats = np.concatenate([x, feats], axis=1)
    return feats


# corner displacements in (dx, dy, dz) order: corner k = (k>>2 & 1, k>>1 & 1, k & 1)
_CORNERS = np.array(
    [[(k >> 2) & 1, (k >> 1) & 1, k & 1] for k in range(8)], dtype=np.int32
)


def _grid_lookup(cfg, x, features, want_cache=False):
    """Trilinear interpolation, all levels and corners in one vectorized gather."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lo = np.asarray(cfg.box_min, dtype=np.float64)
    hi = np.asarray(cfg.box_max, dtype=np.float64)
    u = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    offsets, total = cfg.level_offsets()
    if features.shape != (total, cfg.features_per_level):
        raise ConfigurationError(
            f"grid feature table shape {features.shape} != {(total, cfg.features_per_level)}"
        )
    res = np.asarray(cfg.resolutions(), dtype=np.int64)     # (L,)
    v = res + 1
    off = np.asarray(offsets, dtype=np.int64)
    g = u[:, None, :] * res[None, :, None]                  # (B, L, 3)
    i0 = np.minimum(g.astype(np.int64), (res - 1)[None, :, None])
    f = (g - i0).astype(features.dtype)
    base = off[None, :] + (i0[..., 0] * v[None, :] + i0[..., 1]) * v[None, :] + i0[..., 2]
    # flat displacement of corner (dx,dy,dz) from the base vertex, per level
    corner_off = (_CORNERS[None, :, 0] * v[:, None] + _CORNERS[None, :, 1]) * v[:, None] \
        + _CORNERS[None, :, 2]                              # (L, 8)
    idx = base[:, :, None] + corner_off[None]               # (B, L, 8)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    wts = np.stack(
        [
            (fx if dx else gx) * (fy if dy else gy) * (fz if dz else gz)
            for dx, dy, dz in _CORNERS
        ],
        axis=-1,
    )                                                       # (B, L, 8)
    gathered = features[idx]                                # (B, L, 8, F)
    out = np.einsum("blk,blkf->blf", wts, gathered).reshape(x.shape[0], cfg.dim)
    if want_cache:
        return out, (idx, wts)
    return out


def grid_lookup_backward(cfg, cache, grad_out, total_rows, dtype):
    """Scatter d(enc) back to the vertex table. Returns a (total, feats) array."""
    idx, wts = cache
    b, levels, _ = wts.shape
    f = cfg.features_per_level
    rows = idx.ravel()
    go = grad_out.reshape(b, levels, f)
    grad = np.empty((total_rows, f), dtype=dtype)
    for c in range(f):
        vals = (wts * go[:, :, c][:, :, None]).ravel()
        grad[:, c] = np.bincount(rows, weights=vals, minlength=total_rows)
    return grad


# Real spherical harmonics, hardcoded to degree 4 in Cartesian form.
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)
_C4 = (2.5033429417967046, -1.7701307697799304, 0.9461746957575601,
       -0.6690465435572892, 0.10578554691520431, -0.6690465435572892,
       0.47308734787878004, -1.7701307697799304, 0.6258357354491761)


def sh_basis(degree, dirs):
    """Evaluate the real SH basis for unit directions (B, 3) -> (B, (deg+1)^2)."""
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    cols = [np.full(d.shape[0], _C0)]
    if degree >= 1:
        cols += [-_C1 * y, _C1 * z, -_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        cols += [
            _C2[0] * xy,
            _C2[1] * yz,
            _C2[2] * (2.0 * zz - xx - yy),
            _C2[3] * xz,
            _C2[4] * (xx - yy),
        ]
    if degree >= 3:
        cols += [
            _C3[0] * y * (3.0 * xx - yy),
            _C3[1] * xy * z,
            _C3[2] * y * (4.0 * zz - xx - yy),
            _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            _C3[4] * x * (4.0 * zz - xx - yy),
            _C3[5] * z * (xx - yy),
            _C3[6] * x * (xx - 3.0 * yy),
        ]
    if degree >= 4:
        cols += [
            _C4[0] * xy * (xx - yy),
            _C4[1] * yz * (3.0 * xx - yy),
            _C4[2] * xy * (7.0 * zz - 1.0),
            _C4[3] * yz * (7.0 * zz - 3.0),
            _C4[4] * (zz * (35.0 * zz - 30.0) + 3.0),
            _C4[5] * xz * (7.0 * zz - 3.0),
            _C4[6] * (xx - yy) * (7.0 * zz - 1.0),
            _C4[7] * xz * (xx - 3.0 * yy),
            _C4[8] * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy)),
        ]
    return np.stack(cols, axis=1)


def encode_position(cfg, x, grid_features=None, want_cache=False):
    """Encode positions (B, 3) or (3,) per the encoder config."""
    squeeze = np.asarray(x).ndim == 1
    if cfg.kind == "sinusoidal":
        enc = _sinusoidal(cfg, x)
        result = (enc, None) if want_cache else enc
    elif cfg.kind == "grid":
        if grid_features is None:
            raise ConfigurationError("grid encoder requires the feature table")
        result = _grid_lookup(cfg, x, grid_features, want_cache=want_cache)
    else:
        raise ConfigurationError(f"unknown positional encoder {cfg.kind!r}")
    if squeeze:
        if want_cache:
            enc, cache = result
            return enc[0], cache
        return result[0]
    return result


def encode_direction(cfg, d):
    """Encode unit directions (B, 3) or (3,). Non-unit input is an error."""
    arr = np.atleast_2d(np.asarray(d, dtype=np.float64))
    norms = np.linalg.norm(arr, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise InputError(f"directions must be unit length (max |norm-1| = {worst:.3e})")
    if cfg.kind == "sh":
        enc = sh_basis(cfg.degree, arr)
    elif cfg.kind == "sinusoidal":
        enc = _sinusoidal(cfg, arr)
    else:
        raise ConfigurationError(f"unknown directional encoder {cfg.kind!r}")
    return enc[0] if np.asarray(d).ndim == 1 else enc


# ----------------------------------------------------------------- background


@dataclass
class Background:
    """Per-ray background radiance: a constant color or learned SH-on-direction."""

    kind: str = "constant"
    rgb: np.ndarray = None
    coeffs: np.ndarray = None     # (3, (degree+1)^2), sh kind only
    degree: int = 2

    def __post_init__(self):
        if self.kind == "constant":
            self.rgb = WHITE.copy() if self.rgb is None else np.asarray(self.rgb, dtype=np.float64)
            if self.rgb.shape != (3,) or np.any(self.rgb < 0) or np.any(self.rgb > 1):
                raise ConfigurationError(f"constant background must be rgb in [0,1]^3, got {self.rgb}")
        elif self.kind == "sh":
            n = (self.degree + 1) ** 2
            if self.coeffs is None:
                self.coeffs = np.zeros((3, n))
            self.coeffs = np.asarray(self.coeffs)
            if self.coeffs.shape != (3, n):
                raise ConfigurationError(f"sh background coeffs shape {self.coeffs.shape} != (3, {n})")
        else:
            raise ConfigurationError(f"unknown background kind {self.kind!r}")

    def color(self, dirs):
        """Background rgb for directions (B, 3) -> (B, 3)."""
        dirs = np.atleast_2d(dirs)
        if self.kind == "constant":
            return np.broadcast_to(self.rgb, (dirs.shape[0], 3))
        basis = sh_basis(self.degree, dirs)
        return net._sigmoid(basis @ self.coeffs.T.astype(np.float64))

    def color_grad(self, dirs, grad_rgb):
        """d(loss)/d(coeffs) given d(loss)/d(background rgb) per ray."""
        if self.kind != "sh":
            return None
        basis = sh_basis(self.degree, np.atleast_2d(dirs))
        c = self.color(dirs)
        g = grad_rgb * c * (1.0 - c)          # sigmoid chain
        return g.T @ basis


# ---------------------------------------------------------------- field model


@dataclass
class FieldModel:
    pos_cfg: object
    dir_cfg: object
    trunk: NetParams
    density_head: NetParams
    color_head: NetParams
    feature_dim: int
    split_index: int
    grid_features: np.ndarray = None
    background: Background = None

    def __post_init__(self):
        if self.background is None:
            self.background = Background()
        enc_dim = self.pos_cfg.dim
        if self.trunk.input_dim != enc_dim:
            raise ConfigurationError(
                f"trunk input {self.trunk.input_dim} != encoder dim {enc_dim}"
            )
        if self.trunk.output_dim != self.feature_dim:
            raise ConfigurationError(
                f"trunk output {self.trunk.output_dim} != feature_dim {self.feature_dim}"
            )
        if self.density_head.input_dim != self.feature_dim:
            raise ConfigurationError("density head input must match feature_dim")
        if self.density_head.output_dim != 1:
            raise ConfigurationError("density head must emit one channel")
        expect = self.feature_dim + self.dir_cfg.dim
        if self.color_head.input_dim != expect:
            raise ConfigurationError(
                f"color head input {self.color_head.input_dim} != feature+direction dim {expect}"
            )
        if self.color_head.output_dim != 3:
            raise ConfigurationError("color head must emit rgb")
        if not 0 <= self.split_index <= self.trunk.depth:
            raise ConfigurationError(
                f"split_index {self.split_index} outside 0..{self.trunk.depth}"
            )
        if isinstance(self.pos_cfg, GridConfig):
            if self.grid_features is None:
                raise ConfigurationError("grid encoder requires grid_features")
            _, total = self.pos_cfg.level_offsets()
            if self.grid_features.shape != (total, self.pos_cfg.features_per_level):
                raise ConfigurationError("grid_features shape mismatch")

    @property
    def dtype(self):
        return self.trunk.dtype

    def encode(self, x, want_cache=False):
        return encode_position(self.pos_cfg, x, grid_features=self.grid_features,
                               want_cache=want_cache)

    def parameters(self):
        """Flat list of learnable arrays, fixed order (matches ModelGrads.arrays)."""
        out = self.trunk.arrays() + self.density_head.arrays() + self.color_head.arrays()
        if self.grid_features is not None:
            out.append(self.grid_features)
        if self.background.kind == "sh":
            out.append(self.background.coeffs)
        return out

    def decode_color(self, feats, dirs):
        """Color head on (feature, direction); feats (B,F)/(F,), dirs (B,3)/(3,)."""
        return field_color(self, feats, dirs)

    def astype(self, dtype):
        grid = None if self.grid_features is None else self.grid_features.astype(dtype)
        bg = self.background
        if bg.kind == "sh":
            bg = Background(kind="sh", coeffs=bg.coeffs.astype(dtype), degree=bg.degree)
        else:
            bg = Background(kind="constant", rgb=bg.rgb.copy())
        return FieldModel(
            self.pos_cfg, self.dir_cfg,
            self.trunk.astype(dtype), self.density_head.astype(dtype),
            self.color_head.astype(dtype),
            self.feature_dim, self.split_index, grid, bg,
        )

    # renderer protocol -------------------------------------------------------

    def query(self, xs):
        """(features h, sigma) for positions (M, 3); evaluation only."""
        h = field_h(self, xs)
        return h, field_sigma(self, h)


@dataclass
class ModelGrads:
    """Gradient arrays mirroring FieldModel.parameters()."""

    trunk: net.NetGrads
    density: net.NetGrads
    color: net.NetGrads
    grid: np.ndarray = None
    bg: np.ndarray = None

    @classmethod
    def zeros_for(cls, model):
        return cls(
            net.zero_grads(model.trunk),
            net.zero_grads(model.density_head),
            net.zero_grads(model.color_head),
            None if model.grid_features is None else np.zeros_like(model.grid_features),
            None if model.background.kind != "sh" else np.zeros_like(model.background.coeffs),
        )

    def arrays(self):
        out = self.trunk.arrays() + self.density.arrays() + self.color.arrays()
        if self.grid is not None:
            out.append(self.grid)
        if self.bg is not None:
            out.append(self.bg)
        return out


# ------------------------------------------------------------- field operations


def field_h(model, x):
    """Positional feature h(x) for (B, 3) or (3,) positions."""
    enc = model.encode(x)
    h, _ = net_forward(model.trunk, enc)
    return h


def field_sigma(model, h):
    """Density from features; the head's final softplus keeps it nonnegative."""
    out, _ = net_forward(model.density_head, h)
    return out[..., 0]


def field_color(model, feats, dirs):
    """Decode rgb from features and view directions (broadcasts a single dir)."""
    feats = np.asarray(feats)
    squeeze = feats.ndim == 1
    feats2 = np.atleast_2d(feats)
    enc_d = encode_direction(model.dir_cfg, dirs)
    enc_d = np.atleast_2d(enc_d)
    if enc_d.shape[0] == 1 and feats2.shape[0] > 1:
        enc_d = np.broadcast_to(enc_d, (feats2.shape[0], enc_d.shape[1]))
    inp = np.concatenate([feats2, enc_d.astype(feats2.dtype)], axis=1)
    rgb, _ = net_forward(model.color_head, inp)
    return rgb[0] if squeeze else rgb


def split_trunk(trunk, split_index):
    """Slice the trunk at `split_index` applied layers -> (front, back).

    front is None at split 0 (h2 is the raw encoding) and back is None at full
    depth. Skip layers at or after a positive split are rejected: they would
    need the per-sample encoding after integration has already happened.
    """
    k = split_index
    if not 0 <= k <= trunk.depth:
        raise ConfigurationError(f"split_index {k} outside 0..{trunk.depth}")
    if k > 0 and any(s >= k for s in trunk.skips):
        raise ConfigurationError(
            f"split at {k} crosses skip connections {sorted(trunk.skips)}"
        )
    front = None
    if k > 0:
        front = NetParams(
            trunk.input_dim,
            trunk.weights[:k], trunk.biases[:k], trunk.activations[:k],
            frozenset(s for s in trunk.skips if s < k),
        )
    back = None
    if k < trunk.depth:
        if k == 0:
            back = trunk
        else:
            back = NetParams(
                trunk.weights[k - 1].shape[0],
                trunk.weights[k:], trunk.biases[k:], trunk.activations[k:],
                frozenset(),
            )
    return front, back


def field_h_split(model, x, split_index):
    """Intermediate feature h2(x): activation after `split_index` trunk layers."""
    enc = model.encode(x)
    front, _ = split_trunk(model.trunk, split_index)
    if front is None:
        return np.asarray(enc, dtype=model.dtype)
    h2, _ = net_forward(front, enc)
    return h2


def apply_h1(model, h2, split_index):
    """Remaining trunk layers h1 applied to an (integrated) h2 feature."""
    _, back = split_trunk(model.trunk, split_index)
    if back is None:
        return np.asarray(h2)
    out, _ = net_forward(back, h2)
    return out


def split_dim(model, split_index):
    if split_index == 0:
        return model.pos_cfg.dim
    return model.trunk.weights[split_index - 1].shape[0]


# ------------------------------------------------------------------- presets


@dataclass(frozen=True)
class FieldConfig:
    """Buildable description of a FieldModel; see from_preset for the two presets."""

    pos_kind: str = "sinusoidal"
    num_frequencies: int = 10
    include_raw: bool = True
    grid_levels: int = 5
    grid_base_resolution: int = 16
    grid_per_level_scale: float = 1.5
    grid_features_per_level: int = 2
    box_extent: float = 1.8
    dir_kind: str = "sh"
    sh_degree: int = 4
    dir_frequencies: int = 4
    trunk_depth: int = 8
    trunk_width: int = 256
    trunk_skips: tuple = (4,)
    feature_dim: int = 256
    density_hidden: tuple = ()
    color_hidden: tuple = (128,)
    density_bias: float = -1.0
    split_index: int = None
    dtype: str = "float64"

    @classmethod
    def from_preset(cls, name, **overrides):
        if name == "mlp":
            base = cls()
        elif name == "grid":
            base = cls(
                pos_kind="grid",
                trunk_depth=2, trunk_width=64, trunk_skips=(),
                feature_dim=15, density_hidden=(64,), color_hidden=(64,),
            )
        else:
            raise ConfigurationError(f"unknown preset {name!r} (expected 'mlp' or 'grid')")
        return replace(base, **overrides) if overrides else base

    def pos_config(self):
        if self.pos_kind == "sinusoidal":
            return SinusoidalConfig(self.num_frequencies, self.include_raw)
        if self.pos_kind == "grid":
            e = self.box_extent
            return GridConfig(
                self.grid_levels, self.grid_base_resolution, self.grid_per_level_scale,
                self.grid_features_per_level, (-e, -e, -e), (e, e, e),
            )
        raise ConfigurationError(f"unknown positional encoder {self.pos_kind!r}")

    def dir_config(self):
        if self.dir_kind == "sh":
            return ShConfig(self.sh_degree)
        if self.dir_kind == "sinusoidal":
            return SinusoidalConfig(self.dir_frequencies, True)
        raise ConfigurationError(f"unknown directional encoder {self.dir_kind!r}")

    def build(self, seed=0, background=None):
        """Instantiate a FieldModel with seeded init (deterministic per seed)."""
        rng = np.random.Generator(np.random.PCG64(seed))
        dtype = np.dtype(self.dtype)
        pos_cfg = self.pos_config()
        dir_cfg = self.dir_config()

        specs = []
        width_in = pos_cfg.dim
        for i in range(self.trunk_depth):
            out = self.feature_dim if i == self.trunk_depth - 1 else self.trunk_width
            act = "identity" if i == self.trunk_depth - 1 else "relu"
            in_dim = width_in + (pos_cfg.dim if i in self.trunk_skips else 0)
            specs.append(LayerSpec(in_dim, out, act))
            width_in = out
        trunk = net.init_net(rng, specs, skips=self.trunk_skips, dtype=dtype)

        d_specs, w = [], self.feature_dim
        for hw in self.density_hidden:
            d_specs.append(LayerSpec(w, hw, "relu"))
            w = hw
        d_specs.append(LayerSpec(w, 1, "softplus"))
        density = net.init_net(rng, d_specs, dtype=dtype)
        density.biases[-1][:] = self.density_bias

        c_specs, w = [], self.feature_dim + dir_cfg.dim
        for hw in self.color_hidden:
            c_specs.append(LayerSpec(w, hw, "relu"))
            w = hw
        c_specs.append(LayerSpec(w, 3, "sigmoid"))
        color = net.init_net(rng, c_specs, dtype=dtype)

        grid = None
        if self.pos_kind == "grid":
            _, total = pos_cfg.level_offsets()
            grid = rng.uniform(-1e-2, 1e-2, size=(total, self.grid_features_per_level)).astype(dtype)

        split = self.trunk_depth if self.split_index is None else self.split_index
        return FieldModel(
            pos_cfg, dir_cfg, trunk, density, color,
            self.feature_dim, split, grid, background,
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown field config key {sorted(unknown)[0]!r}")
        d = dict(d)
        for tup_key in ("trunk_skips", "density_hidden", "color_hidden"):
            if tup_key in d and d[tup_key] is not None:
                d[tup_key] = tuple(d[tup_key])
        return cls(**d)


# -------------------------------------------------------------- serialization


def _cfg_to_dict(cfg):
    d = dataclasses.asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def _cfg_from_dict(d):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "sinusoidal":
        return SinusoidalConfig(**d)
    if kind == "grid":
        d["box_min"] = tuple(d["box_min"])
        d["box_max"] = tuple(d["box_max"])
        return GridConfig(**d)
    if kind == "sh":
        return ShConfig(**d)
    raise FormatError(f"unknown encoder kind {kind!r} in model header")


def save_model(path, model):
    """JSON header followed by net checkpoint blobs (and raw f64 grid/bg data)."""
    header = {
        "format": "linerf-field",
        "version": _MODEL_VERSION,
        "dtype": str(np.dtype(model.dtype)),
        "pos": _cfg_to_dict(model.pos_cfg),
        "dir": _cfg_to_dict(model.dir_cfg),
        "feature_dim": model.feature_dim,
        "split_index": model.split_index,
        "background": {
            "kind": model.background.kind,
            "rgb": None if model.background.rgb is None else model.background.rgb.tolist(),
            "degree": model.background.degree,
        },
        "grid_rows": None if model.grid_features is None else int(model.grid_features.shape[0]),
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        net.write_net_blob(fh, model.trunk.astype(np.float64))
        net.write_net_blob(fh, model.density_head.astype(np.float64))
        net.write_net_blob(fh, model.color_head.astype(np.float64))
        if model.grid_features is not None:
            fh.write(np.ascontiguousarray(model.grid_features, dtype="<f8").tobytes())
        if model.background.kind == "sh":
            fh.write(np.ascontiguousarray(model.background.coeffs, dtype="<f8").tobytes())


def load_model(path, dtype=None):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MODEL_MAGIC:
            raise FormatError(f"bad model magic {magic!r}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise FormatError("truncated model header")
        (hlen,) = struct.unpack("<I", raw)
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"unreadable model header: {e}") from e
        if header.get("format") != "linerf-field" or header.get("version") != _MODEL_VERSION:
            raise FormatError("not a linerf field model file")
        dtype = np.dtype(header["dtype"] if dtype is None else dtype)
        pos_cfg = _cfg_from_dict(header["pos"])
        dir_cfg = _cfg_from_dict(header["dir"])
        trunk = net.read_net_blob(fh, dtype=dtype)
        density = net.read_net_blob(fh, dtype=dtype)
        color = net.read_net_blob(fh, dtype=dtype)
        grid = None
        if header["grid_rows"] is not None:
            if not isinstance(pos_cfg, GridConfig):
                raise FormatError("grid data present but encoder is not a grid")
            _, total = pos_cfg.level_offsets()
            nbytes = 8 * total * pos_cfg.features_per_level
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise FormatError("truncated grid feature table")
            grid = np.frombuffer(buf, dtype="<f8").reshape(
                total, pos_cfg.features_per_level
            ).astype(dtype)
        bg_meta = header["background"]
        if bg_meta["kind"] == "sh":
            n = (bg_meta["degree"] + 1) ** 2
            buf = fh.read(8 * 3 * n)
            if len(buf) != 8 * 3 * n:
                raise FormatError("truncated background coefficients")
            coeffs = np.frombuffer(buf, dtype="<f8").reshape(3, n).astype(dtype)
            bg = Background(kind="sh", coeffs=coeffs, degree=bg_meta["degree"])
        else:
            bg = Background(kind="constant", rgb=np.asarray(bg_meta["rgb"]))
        if fh.read(1):
            raise FormatError("trailing bytes after model payload")
    return FieldModel(
        pos_cfg, dir_cfg, trunk, density, color,
        header["feature_dim"], header["split_index"], grid, bg,
    )
