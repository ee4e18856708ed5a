"""Image containers and dataset I/O.

Images are float64 linear rgb in [0,1]. Files store sRGB-encoded bytes; the
PPM P6 writer/reader is exact and hand-rolled (fixed header grammar), PNG
goes through Pillow. Datasets use the transforms_{train,test}.json layout
with a few extra top-level keys (near/far/background/scene/seed/resolution).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, InputError

SRGB_GAMMA = 2.4
_SRGB_A = 0.055
_SRGB_PHI = 12.92
_SRGB_CUT_LIN = 0.0031308
_SRGB_CUT_ENC = 0.04045


@dataclass
class Image:
    """Linear rgb pixels, shape (H, W, 3), float64 in [0,1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InputError(f"image must be (H,W,3), got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise InputError("image contains non-finite values")
        self.pixels = np.clip(self.pixels, 0.0, 1.0)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def srgb_encode(linear):
    """Linear [0,1] -> sRGB-encoded [0,1] (piecewise 2.4-exponent transfer)."""
    linear = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    low = linear * _SRGB_PHI
    high = (1 + _SRGB_A) * np.power(np.maximum(linear, _SRGB_CUT_LIN), 1.0 / SRGB_GAMMA) - _SRGB_A
    return np.where(linear <= _SRGB_CUT_LIN, low, high)


def srgb_decode(encoded):
    """sRGB-encoded [0,1] -> linear [0,1]; inverse of srgb_encode."""
    encoded = np.clip(np.asarray(encoded, dtype=np.float64), 0.0, 1.0)
    low = encoded / _SRGB_PHI
    high = np.power((encoded + _SRGB_A) / (1 + _SRGB_A), SRGB_GAMMA)
    return np.where(encoded <= _SRGB_CUT_ENC, low, high)


def to_bytes(img):
    """Quantize linear rgb to uint8 via the sRGB transfer (round-half-up free)."""
    return np.clip(np.rint(srgb_encode(img.pixels) * 255.0), 0, 255).astype(np.uint8)


def from_bytes(raw, height, width):
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return Image(srgb_decode(arr.astype(np.float64) / 255.0))


# ------------------------------------------------------------------ PPM (P6)


def write_ppm(path, img):
    """Binary PPM with the exact header b"P6\\n{w} {h}\\n255\\n"."""
    data = to_bytes(img)
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (missing P6 magic)")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with one whitespace byte after maxval before the pixel block
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError(f"{path}: non-numeric PPM header fields {fields}")
    if maxval != 255:
        raise FormatError(f"{path}: unsupported PPM maxval {maxval}, expected 255")
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad PPM dimensions {width}x{height}")
    need = width * height * 3
    body = raw[pos : pos + need]
    if len(body) != need:
        raise FormatError(
            f"{path}: PPM pixel block has {len(body)} bytes, expected {need}"
        )
    return from_bytes(body, height, width)


# --------------------------------------------------------------------- PNG


def write_png(path, img):
    from PIL import Image as PILImage

    PILImage.fromarray(to_bytes(img), mode="RGB").save(str(path), format="PNG")


def read_png(path):
    from PIL import Image as PILImage

    with PILImage.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return from_bytes(arr.tobytes(), arr.shape[0], arr.shape[1])


def write_image(path, img):
    path = Path(path)
    if path.suffix == ".ppm":
        write_ppm(path, img)
    elif path.suffix == ".png":
        write_png(path, img)
    else:
        raise FormatError(f"unsupported image format {path.suffix!r} (use .ppm or .png)")


def read_image(path):
    path = Path(path)
    if path.suffix == ".ppm":
        return read_ppm(path)
    if path.suffix == ".png":
        return read_png(path)
    raise FormatError(f"unsupported image format {path.suffix!r} (use .ppm or .png)")


def downsample_box(img, factor):
    """Average factor x factor pixel blocks; resolution must divide evenly."""
    if factor < 1 or img.height % factor or img.width % factor:
        raise InputError(
            f"box filter factor {factor} does not divide {img.width}x{img.height}"
        )
    h, w = img.height // factor, img.width // factor
    px = img.pixels.reshape(h, factor, w, factor, 3).mean(axis=(1, 3))
    return Image(px)


# --------------------------------------------------------------------- JSON


def write_json(path, obj):
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    text = json.dumps(obj, sort_keys=True, indent=1)
    Path(path).write_text(text + "\n", encoding="ascii")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})")


# ------------------------------------------------------------------ datasets


@dataclass
class DatasetSplit:
    images: list
    cameras: list


@dataclass
class Dataset:
    train: DatasetSplit
    test: DatasetSplit
    near: float
    far: float
    background: np.ndarray
    scene_name: str = ""
    seed: int = 0

    @property
    def resolution(self):
        return self.train.images[0].width


_REQUIRED_FRAME_KEYS = ("file_path", "transform_matrix")


def _load_split(root, split):
    from .scenes import Camera

    meta_path = root / f"transforms_{split}.json"
    if not meta_path.exists():
        raise DataError(f"missing {meta_path.name} in {root}")
    meta = read_json(meta_path)
    for key in ("camera_angle_x", "frames"):
        if key not in meta:
            raise DataError(f"{meta_path.name}: missing required key {key!r}")
    if not meta["frames"]:
        raise DataError(f"{meta_path.name}: empty frame list")
    images, cameras = [], []
    for fi, frame in enumerate(meta["frames"]):
        for key in _REQUIRED_FRAME_KEYS:
            if key not in frame:
                raise DataError(f"{meta_path.name}: frame {fi} missing key {key!r}")
        base = root / frame["file_path"]
        candidates = [base] if base.suffix else [base.with_suffix(e) for e in (".ppm", ".png")]
        for candidate in candidates:
            if candidate.exists():
                img = read_image(candidate)
                break
        else:
            raise DataError(f"frame image not found for {base}")
        images.append(img)
        cameras.append(
            Camera(
                np.asarray(frame["transform_matrix"], dtype=np.float64),
                img.width,
                img.height,
                float(meta["camera_angle_x"]),
            )
        )
    shapes = {im.pixels.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"{meta_path.name}: mixed image resolutions {sorted(shapes)}")
    return DatasetSplit(images, cameras), meta


def _downscale_split(split, factor):
    from .scenes import Camera

    images = [downsample_box(im, factor) for im in split.images]
    cameras = [
        Camera(cam.c2w, cam.width // factor, cam.height // factor, cam.camera_angle_x)
        for cam in split.cameras
    ]
    return DatasetSplit(images, cameras)


def load_dataset(root, downscale=1):
    """Read a generated dataset directory into memory.

    Defaults when the metadata omits them: near 2.0, far 6.0, white background.
    downscale box-averages images by an integer factor and shrinks the
    cameras to match (the field of view is unchanged).
    """
    if downscale < 1:
        raise InputError(f"downscale must be a positive integer, got {downscale}")
    root = Path(root)
    train, meta = _load_split(root, "train")
    test, _ = _load_split(root, "test")
    if downscale > 1:
        train = _downscale_split(train, downscale)
        test = _downscale_split(test, downscale)
    bg = np.asarray(meta.get("background", (1.0, 1.0, 1.0)), dtype=np.float64)
    if bg.shape != (3,):
        raise DataError(f"dataset background must be rgb, got shape {bg.shape}")
    return Dataset(
        train=train,
        test=test,
        near=float(meta.get("near", 2.0)),
        far=float(meta.get("far", 6.0)),
        background=bg,
        scene_name=str(meta.get("scene", "")),
        seed=int(meta.get("seed", 0)),
    )
