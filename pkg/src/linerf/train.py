"""Training loop, image metrics, evaluation, and paired renderer comparisons.

Training is plain Adam on MSE over randomly drawn pixel rays, with the batch
for iteration i seeded by (seed, i) so runs are exactly reproducible and the
classic/integrated renderers see identical ray streams. Compute can run in
float32; checkpoints and returned models are always float64.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import net
from .data import Image, write_image, write_json
from .errors import ConfigurationError, InputError, TrainingError
from .field import Background, FieldConfig, save_model, split_trunk
from .render import (
    RenderConfig,
    _sample_t,
    parse_renderer,
    render_image,
    render_rays_grad,
)
from .scenes import camera_rays

# ------------------------------------------------------------------- metrics

PSNR_CAP = 99.0
_MSE_FLOOR = 1e-10


def psnr(a, b):
    """Peak signal-to-noise ratio in dB on linear rgb in [0,1], capped at 99."""
    a = np.asarray(getattr(a, "pixels", a), dtype=np.float64)
    b = np.asarray(getattr(b, "pixels", b), dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def _luma(img):
    px = np.asarray(getattr(img, "pixels", img), dtype=np.float64)
    return px @ np.array([0.2126, 0.7152, 0.0722])


def _gaussian_kernel(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over valid Gaussian windows of the images' luma channel."""
    ya, yb = _luma(a), _luma(b)
    if ya.shape != yb.shape:
        raise InputError(f"ssim shape mismatch {ya.shape} vs {yb.shape}")
    if ya.shape[0] < size or ya.shape[1] < size:
        raise InputError(f"image {ya.shape} smaller than ssim window {size}x{size}")
    kern = _gaussian_kernel(size, sigma)

    def filt(img):
        win = np.lib.stride_tricks.sliding_window_view(img, (size, size))
        return np.tensordot(win, kern, axes=([2, 3], [0, 1]))

    mu_a, mu_b = filt(ya), filt(yb)
    var_a = filt(ya * ya) - mu_a**2
    var_b = filt(yb * yb) - mu_b**2
    cov = filt(ya * yb) - mu_a * mu_b
    c1, c2 = k1**2, k2**2  # dynamic range L = 1 in linear rgb
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(np.mean(s))


# -------------------------------------------------------------- configuration


@dataclass(frozen=True)
class TrainConfig:
    field: FieldConfig = dc_field(default_factory=lambda: FieldConfig.from_preset("grid"))
    renderer: str = "linerf"
    iters: int = 1500
    batch_rays: int = 512
    n_samples: int = 48
    lr: float = 5e-3
    lr_final: float = 1e-4
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iters < 1 or self.batch_rays < 1 or self.n_samples < 1:
            raise ConfigurationError("iters, batch_rays, n_samples must be positive")
        if self.lr <= 0 or (self.lr_final is not None and self.lr_final <= 0):
            raise ConfigurationError("learning rates must be positive")
        parse_renderer(self.renderer)

    def lr_at(self, it):
        """Log-linear decay from lr to lr_final across the run."""
        if self.lr_final is None or self.iters == 1:
            return self.lr
        frac = it / (self.iters - 1)
        return float(self.lr * (self.lr_final / self.lr) ** frac)


@dataclass
class TrainResult:
    model: object
    loss_curve: list
    config: TrainConfig
    seconds: float = 0.0


def _pool_rays(dataset):
    """All train-view pixel rays and their targets, concatenated."""
    origins, dirs, targets = [], [], []
    for img, cam in zip(dataset.train.images, dataset.train.cameras):
        o, d = camera_rays(cam)
        origins.append(o)
        dirs.append(d)
        targets.append(img.pixels.reshape(-1, 3))
    return (
        np.concatenate(origins),
        np.concatenate(dirs),
        np.concatenate(targets),
    )


def train(dataset, cfg, out_dir=None):
    """Fit a field to the dataset's train split; returns a float64 model.

    Raises TrainingError (with the iteration and seed) if the loss or any
    gradient goes non-finite. When out_dir is given, writes model.lfm,
    loss_curve.csv, and optional periodic checkpoints there.
    """
    t0 = time.perf_counter()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    mode, k = parse_renderer(cfg.renderer)
    model = cfg.field.build(cfg.seed, background=Background(rgb=dataset.background))
    if mode == "split":
        split_trunk(model.trunk, k)  # validates range and skip crossings
        model.split_index = k
    model = model.astype(np.dtype(cfg.dtype))

    origins, dirs, targets = _pool_rays(dataset)
    m = origins.shape[0]
    state = net.AdamState.for_arrays(model.parameters(), lr=cfg.lr)
    near = np.full(cfg.batch_rays, dataset.near)
    far = np.full(cfg.batch_rays, dataset.far)
    curve = []
    for it in range(cfg.iters):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, it])))
        idx = rng.integers(0, m, size=cfg.batch_rays)
        t, deltas = _sample_t(near, far, cfg.n_samples, rng)
        try:
            _, grads, loss = render_rays_grad(
                model, origins[idx], dirs[idx], t, deltas,
                renderer=cfg.renderer, targets=targets[idx],
            )
            if not math.isfinite(loss):
                raise TrainingError(f"loss is {loss}")
            net.adam_update_arrays(model.parameters(), grads.arrays(), state,
                                   lr=cfg.lr_at(it))
        except TrainingError as e:
            raise TrainingError(
                f"training diverged at iteration {it} (seed {cfg.seed}): {e}"
            ) from e
        if it % cfg.log_every == 0 or it == cfg.iters - 1:
            curve.append((it, float(loss)))
        if out_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            ck = Path(out_dir) / f"checkpoint_{it + 1:06d}.lfm"
            save_model(ck, model.astype(np.float64))

    final = model.astype(np.float64)
    result = TrainResult(
        model=final, loss_curve=curve, config=cfg,
        seconds=time.perf_counter() - t0,
    )
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(out / "model.lfm", final)
        with open(out / "loss_curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss"])
            writer.writerows(curve)
    return result


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    renderer: str
    rows: list
    mean_psnr: float
    mean_ssim: float

    def to_dict(self):
        return {
            "renderer": self.renderer,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "views": self.rows,
        }


def evaluate(model, dataset, renderer="linerf", n_samples=64, threads=None,
             keep_images=False):
    """Render every test view and score it against ground truth."""
    cfg = RenderConfig(
        renderer=renderer, n_samples=n_samples,
        near=dataset.near, far=dataset.far,
        background=Background(rgb=dataset.background), threads=threads,
    )
    rows, images = [], []
    for vi, (gt, cam) in enumerate(zip(dataset.test.images, dataset.test.cameras)):
        img = render_image(model, cam, cfg)
        rows.append({"view": vi, "psnr": psnr(img, gt), "ssim": ssim(img, gt)})
        if keep_images:
            images.append(img)
    report = EvalReport(
        renderer=renderer,
        rows=rows,
        mean_psnr=float(np.mean([r["psnr"] for r in rows])),
        mean_ssim=float(np.mean([r["ssim"] for r in rows])),
    )
    return (report, images) if keep_images else report


# ---------------------------------------------------------------- comparison

_MATCH_KEYS = ("field", "iters", "batch_rays", "n_samples", "lr", "lr_final", "dtype")


@dataclass
class CompareResult:
    rows: list
    summary: dict
    reports: dict


def compare(dataset, cfg_a, cfg_b, seeds, out_dir=None, eval_samples=64,
            threads=None):
    """Train both configs across shared seeds and score them on the test split.

    The two configs must agree on everything except the renderer, so the
    comparison isolates the estimator. Writes compare.csv, summary.json, and
    per-view difference heat maps for the first seed when out_dir is set.
    """
    for key in _MATCH_KEYS:
        va, vb = getattr(cfg_a, key), getattr(cfg_b, key)
        if va != vb:
            raise ConfigurationError(
                f"compare() needs matched budgets: {key} differs ({va!r} vs {vb!r})"
            )
    if cfg_a.renderer == cfg_b.renderer:
        raise ConfigurationError("compare() needs two different renderers")
    if not seeds:
        raise ConfigurationError("compare() needs at least one seed")

    rows = []
    reports = {}
    first_seed_images = {}
    for seed in seeds:
        for cfg in (cfg_a, cfg_b):
            run_cfg = dataclasses.replace(cfg, seed=seed)
            result = train(dataset, run_cfg)
            report, imgs = evaluate(
                result.model, dataset, renderer=cfg.renderer,
                n_samples=eval_samples, threads=threads, keep_images=True,
            )
            reports[(seed, cfg.renderer)] = report
            if seed == seeds[0]:
                first_seed_images[cfg.renderer] = imgs
            for r in report.rows:
                rows.append({
                    "seed": seed, "renderer": cfg.renderer,
                    "view": r["view"], "psnr": r["psnr"], "ssim": r["ssim"],
                })

    def seed_means(renderer):
        return {
            s: reports[(s, renderer)].mean_psnr for s in seeds
        }

    means_a, means_b = seed_means(cfg_a.renderer), seed_means(cfg_b.renderer)
    summary = {
        "seeds": list(seeds),
        "renderers": [cfg_a.renderer, cfg_b.renderer],
        cfg_a.renderer: {
            "mean_psnr": float(np.mean(list(means_a.values()))),
            "mean_ssim": float(np.mean([reports[(s, cfg_a.renderer)].mean_ssim for s in seeds])),
            "per_seed_psnr": means_a,
        },
        cfg_b.renderer: {
            "mean_psnr": float(np.mean(list(means_b.values()))),
            "mean_ssim": float(np.mean([reports[(s, cfg_b.renderer)].mean_ssim for s in seeds])),
            "per_seed_psnr": means_b,
        },
        "psnr_diff_per_seed": {s: means_b[s] - means_a[s] for s in seeds},
    }
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "compare.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["seed", "renderer", "view", "psnr", "ssim"])
            writer.writeheader()
            writer.writerows(rows)
        write_json(out / "summary.json", _jsonable(summary))
        imgs_a = first_seed_images[cfg_a.renderer]
        imgs_b = first_seed_images[cfg_b.renderer]
        for vi, (ia, ib) in enumerate(zip(imgs_a, imgs_b)):
            diff = np.abs(ia.pixels - ib.pixels).mean(axis=2)
            scale = max(float(diff.max()), 1e-12)
            heat = np.repeat((diff / scale)[:, :, None], 3, axis=2)
            write_image(out / f"diff_s{seeds[0]}_v{vi:03d}.png", Image(heat))
    return CompareResult(rows=rows, summary=summary, reports=reports)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
