"""Command line interface.

Subcommands: gen-data (render an analytic scene to a dataset), train, render,
eval, verify (numerical checks of the estimator identities and bounds), and
compare (paired classic-vs-integrated training runs). All file output stays
under the --out directory of the invoked subcommand.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bounds as bounds_mod
from .data import Image, load_dataset, read_json, write_image, write_json
from .errors import ConfigurationError, LinerfError
from .field import Background, FieldConfig, load_model
from .render import RenderConfig, _sample_t, render_image, render_rays
from .scenes import SCENES, AnalyticField, DiracDensityField, camera_rays, gen_dataset, make_glossy_scene
from .train import TrainConfig, compare, evaluate, train


# ------------------------------------------------------------------ run config


def _train_config_from(args):
    """Merge defaults, an optional JSON config file, and CLI flag overrides."""
    kwargs = {}
    preset = None
    if args.config:
        raw = read_json(args.config)
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{args.config}: run config must be a JSON object")
        raw = dict(raw)
        preset = raw.pop("preset", None)
        field_dict = raw.pop("field", None)
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        for key in raw:
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r} in {args.config}")
        kwargs.update(raw)
        if preset is not None and not isinstance(preset, str):
            raise ConfigurationError("config key 'preset' must be a string")
        if field_dict is not None:
            if preset is not None:
                base = FieldConfig.from_preset(preset).to_dict()
                base.update(field_dict)
                kwargs["field"] = FieldConfig.from_dict(base)
            else:
                kwargs["field"] = FieldConfig.from_dict(field_dict)
        elif preset is not None:
            kwargs["field"] = FieldConfig.from_preset(preset)
    if args.preset is not None:
        kwargs["field"] = FieldConfig.from_preset(args.preset)
    for flag, key in (
        ("renderer", "renderer"), ("iters", "iters"), ("batch_rays", "batch_rays"),
        ("samples", "n_samples"), ("lr", "lr"), ("lr_final", "lr_final"),
        ("seed", "seed"), ("dtype", "dtype"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            kwargs[key] = val
    if "field" in kwargs and isinstance(kwargs["field"], dict):
        kwargs["field"] = FieldConfig.from_dict(kwargs["field"])
    return TrainConfig(**kwargs)


# ------------------------------------------------------------------- commands


def _cmd_gen_data(args):
    scene = SCENES[args.scene]()
    out = gen_dataset(
        scene, args.out, n_train=args.train_views, n_test=args.test_views,
        resolution=args.resolution, seed=args.seed, supersample=args.supersample,
        image_format=args.format,
    )
    print(f"wrote {args.train_views} train / {args.test_views} test views to {out}")
    return 0


def _cmd_train(args):
    cfg = _train_config_from(args)
    dataset = load_dataset(args.data)
    result = train(dataset, cfg, out_dir=args.out)
    echo = dataclasses.asdict(cfg)
    echo["field"] = cfg.field.to_dict()
    write_json(Path(args.out) / "run_config.json", echo)
    print(
        f"trained {cfg.renderer} for {cfg.iters} iterations in {result.seconds:.1f}s, "
        f"final loss {result.loss_curve[-1][1]:.6f}"
    )
    print(f"model written to {Path(args.out) / 'model.lfm'}")
    return 0


def _cmd_render(args):
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    split = dataset.test if args.split == "test" else dataset.train
    views = range(len(split.cameras))
    if args.views:
        views = [int(v) for v in args.views.split(",")]
        for v in views:
            if not 0 <= v < len(split.cameras):
                raise ConfigurationError(f"view {v} outside 0..{len(split.cameras) - 1}")
    cfg = RenderConfig(
        renderer=args.renderer, n_samples=args.samples,
        near=dataset.near, far=dataset.far,
        background=Background(rgb=dataset.background), threads=args.threads,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in views:
        img = render_image(model, split.cameras[v], cfg)
        write_image(out / f"r_{v:03d}.{args.format}", img)
    print(f"rendered {len(list(views))} {args.split} views with {args.renderer} to {out}")
    return 0


def _cmd_eval(args):
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    report = evaluate(
        model, dataset, renderer=args.renderer, n_samples=args.samples,
        threads=args.threads,
    )
    for row in report.rows:
        print(f"view {row['view']:3d}: psnr {row['psnr']:7.3f} dB  ssim {row['ssim']:.4f}")
    print(
        f"{args.renderer}: mean psnr {report.mean_psnr:.3f} dB, "
        f"mean ssim {report.mean_ssim:.4f} over {len(report.rows)} views"
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "eval.json", report.to_dict())
    return 0


def _cmd_compare(args):
    dataset = load_dataset(args.data)
    base = _train_config_from(args)
    cfg_a = dataclasses.replace(base, renderer=args.renderer_a)
    cfg_b = dataclasses.replace(base, renderer=args.renderer_b)
    seeds = [int(s) for s in args.seeds.split(",")]
    result = compare(
        dataset, cfg_a, cfg_b, seeds, out_dir=args.out,
        eval_samples=args.eval_samples, threads=args.threads,
    )
    for name in (args.renderer_a, args.renderer_b):
        s = result.summary[name]
        print(f"{name:>10}: mean psnr {s['mean_psnr']:.3f} dB, mean ssim {s['mean_ssim']:.4f}")
    for seed, diff in result.summary["psnr_diff_per_seed"].items():
        print(f"  seed {seed}: {args.renderer_b} - {args.renderer_a} = {diff:+.3f} dB")
    return 0


# ------------------------------------------------------- verify: equivalence


@dataclass
class _AffineTestField:
    """Smooth positive density with an affine feature decoder.

    With f(h) = a + B h the per-sample and integrated estimators agree in
    exact arithmetic for any foreground mass, so the rendered difference
    measures accumulated rounding only.
    """

    a: np.ndarray
    b: np.ndarray
    background: Background

    def query(self, xs):
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        x, y, z = xs[:, 0], xs[:, 1], xs[:, 2]
        feats = np.stack(
            [x, z, np.sin(x + 2.0 * y), np.cos(3.0 * z), x * y], axis=1
        )
        sigma = 1.2 + np.sin(2.0 * x) * np.cos(y)
        return feats, sigma

    def decode_color(self, feats, dirs):
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        return self.a + feats @ self.b.T


@dataclass
class _PointShellField:
    """Delegates features/decoding, but density is a tiny opaque ball.

    sigma is enormous inside `radius` of `point` and zero elsewhere, so a
    sample landing in the ball takes quadrature weight exactly 1.0 in float64
    and every other weight is exactly 0: a constructed one-hot ray.
    """

    inner: object
    point: np.ndarray
    radius: float = 1e-4
    sigma_big: float = 1e12

    @property
    def background(self):
        return self.inner.background

    def query(self, xs):
        feats, _ = self.inner.query(xs)
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        dist = np.linalg.norm(xs - self.point, axis=1)
        return feats, np.where(dist < self.radius, self.sigma_big, 0.0)

    def decode_color(self, feats, dirs):
        return self.inner.decode_color(feats, dirs)


def _rays_toward_origin(rng, n_rays, radius=2.5, jitter=0.3):
    origins = rng.normal(size=(n_rays, 3))
    origins *= radius / np.linalg.norm(origins, axis=1, keepdims=True)
    targets = rng.uniform(-jitter, jitter, size=(n_rays, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


def _equivalence_one_hot(seed, n_rays, n_samples):
    """classic == integrated when one sample holds all the weight.

    The quadrature weights are exactly one-hot, so the estimators agree to
    rounding; batched and single-row decodes may round differently, which
    keeps this at 1e-12 rather than literal zero.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 17])))
    scene = make_glossy_scene()
    inner = AnalyticField(scene, feature_mode="shading")
    origins, dirs = _rays_toward_origin(rng, n_rays)
    near, far = 0.5, 4.5
    rows = []
    for i in range(n_rays):
        t, deltas = _sample_t(np.array([near]), np.array([far]), n_samples, None)
        j = int(rng.integers(n_samples // 4, 3 * n_samples // 4))
        point = origins[i] + t[0, j] * dirs[i]
        fld = _PointShellField(inner, point)
        c = render_rays(fld, origins[i : i + 1], dirs[i : i + 1], t, deltas, "classic")
        o = render_rays(fld, origins[i : i + 1], dirs[i : i + 1], t, deltas, "linerf")
        for ch in range(3):
            rows.append({
                "case": "one_hot", "ray": i, "channel": "rgb"[ch],
                "classic": c[0, ch], "ours": o[0, ch],
                "abs_diff": abs(c[0, ch] - o[0, ch]),
            })
    return rows, 1e-12


def _equivalence_affine(seed, n_rays, n_samples):
    """classic == integrated up to rounding when the decoder is affine."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 29])))
    fld = _AffineTestField(
        a=rng.uniform(0.1, 0.4, size=3),
        b=rng.uniform(-0.3, 0.3, size=(3, 5)),
        background=Background(rgb=np.array([0.3, 0.4, 0.5])),
    )
    origins, dirs = _rays_toward_origin(rng, n_rays)
    t, deltas = _sample_t(
        np.full(n_rays, 0.5), np.full(n_rays, 4.5), n_samples, rng
    )
    c = render_rays(fld, origins, dirs, t, deltas, "classic")
    o = render_rays(fld, origins, dirs, t, deltas, "linerf")
    rows = []
    for i in range(n_rays):
        for ch in range(3):
            rows.append({
                "case": "affine", "ray": i, "channel": "rgb"[ch],
                "classic": c[i, ch], "ours": o[i, ch],
                "abs_diff": abs(c[i, ch] - o[i, ch]),
            })
    return rows, 1e-12


def _equivalence_split_depth(seed, n_rays, n_samples):
    """split at full trunk depth is the integrated renderer, bit for bit."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 41])))
    cfg = FieldConfig(
        num_frequencies=4, trunk_depth=3, trunk_width=32, trunk_skips=(),
        feature_dim=16, color_hidden=(16,),
    )
    model = cfg.build(seed=seed)
    origins, dirs = _rays_toward_origin(rng, n_rays)
    t, deltas = _sample_t(
        np.full(n_rays, 0.5), np.full(n_rays, 4.5), n_samples, rng
    )
    a = render_rays(model, origins, dirs, t, deltas, "linerf")
    b = render_rays(model, origins, dirs, t, deltas, f"split:{cfg.trunk_depth}")
    rows = []
    for i in range(n_rays):
        for ch in range(3):
            rows.append({
                "case": "split_at_depth", "ray": i, "channel": "rgb"[ch],
                "classic": a[i, ch], "ours": b[i, ch],
                "abs_diff": abs(a[i, ch] - b[i, ch]),
            })
    return rows, 0.0


def _verify_equivalence(args, out):
    rows, case_meta = [], {}
    for fn in (_equivalence_one_hot, _equivalence_affine, _equivalence_split_depth):
        case_rows, tol = fn(args.seed, args.rays, args.samples)
        rows.extend(case_rows)
        name = case_rows[0]["case"]
        worst = float(max(r["abs_diff"] for r in case_rows))
        case_meta[name] = {
            "max_abs_diff": worst, "tolerance": tol, "pass": worst <= tol,
        }
    with open(out / "equivalence.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["case", "ray", "channel", "classic", "ours", "abs_diff"]
        )
        writer.writeheader()
        writer.writerows(rows)
    ok = all(meta["pass"] for meta in case_meta.values())
    write_json(out / "summary.json", {"mode": "equivalence", "cases": case_meta, "pass": ok})
    for name, meta in case_meta.items():
        status = "PASS" if meta["pass"] else "FAIL"
        print(
            f"{name:>15}: max |classic - ours| = {meta['max_abs_diff']:.3e} "
            f"(tol {meta['tolerance']:.0e}) {status}"
        )
    return ok


def _verify_bounds(args, out):
    if not args.model or not args.data:
        raise ConfigurationError("verify --mode bounds needs --model and --data")
    model = load_model(args.model, dtype="float64")
    dataset = load_dataset(args.data)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([args.seed, 23])))
    origins, dirs = [], []
    for cam in dataset.test.cameras[: max(1, min(3, len(dataset.test.cameras)))]:
        o, d = camera_rays(cam)
        origins.append(o)
        dirs.append(d)
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    pick = rng.choice(origins.shape[0], size=min(args.rays, origins.shape[0]), replace=False)
    reports = bounds_mod.bound_reports_for_rays(
        model, origins[pick], dirs[pick], dataset.near, dataset.far, args.samples
    )
    ok, violations = bounds_mod.verify_bound_dominance(reports)
    with open(out / "bounds.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(bounds_mod.REPORT_FIELDS))
        writer.writeheader()
        writer.writerows(bounds_mod.report_rows(reports))
    margins = [float(m) for rep in reports for m in rep.jensen_margin]
    summary = {
        "mode": "bounds",
        "rays_requested": int(len(pick)),
        "foreground_rays": len(reports),
        "min_jensen_margin": min(margins) if margins else None,
        "violations": violations,
        "pass": ok,
    }
    write_json(out / "summary.json", summary)
    print(
        f"bounds: {len(reports)} foreground rays of {len(pick)} sampled, "
        f"min jensen margin {summary['min_jensen_margin']:.3e}"
    )
    for v in violations:
        print(f"  violation: {v}")
    print("PASS" if ok else "FAIL")
    return ok


def _cmd_verify(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "equivalence":
        ok = _verify_equivalence(args, out)
    else:
        ok = _verify_bounds(args, out)
    return 0 if ok else 1


# -------------------------------------------------------------------- parser


def _add_train_flags(p):
    p.add_argument("--config", help="JSON run config (flags override its values)")
    p.add_argument("--preset", choices=("mlp", "grid"), help="field architecture preset")
    p.add_argument("--renderer", help="classic | linerf | split:<k>")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-rays", type=int, dest="batch_rays")
    p.add_argument("--samples", type=int, help="quadrature samples per ray")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-final", type=float, dest="lr_final")
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))


def build_parser():
    p = argparse.ArgumentParser(
        prog="linerf",
        description="Volume rendering with per-sample or integrated-feature color decoding.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render an analytic scene into a dataset directory")
    g.add_argument("--scene", choices=sorted(SCENES), default="glossy")
    g.add_argument("--out", required=True)
    g.add_argument("--train-views", type=int, default=30, dest="train_views")
    g.add_argument("--test-views", type=int, default=10, dest="test_views")
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--supersample", type=int, default=2, help="rays per pixel axis")
    g.add_argument("--format", choices=("ppm", "png"), default="ppm")
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="fit a field to a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_train_flags(t)
    t.set_defaults(func=_cmd_train)

    r = sub.add_parser("render", help="render dataset views from a trained model")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--renderer", default="linerf")
    r.add_argument("--samples", type=int, default=64)
    r.add_argument("--split", choices=("train", "test"), default="test")
    r.add_argument("--views", help="comma-separated view indices (default: all)")
    r.add_argument("--threads", type=int, default=None)
    r.add_argument("--format", choices=("png", "ppm"), default="png")
    r.set_defaults(func=_cmd_render)

    e = sub.add_parser("eval", help="psnr/ssim of a model on the test split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--renderer", default="linerf")
    e.add_argument("--samples", type=int, default=64)
    e.add_argument("--threads", type=int, default=None)
    e.add_argument("--out", help="optional directory for eval.json")
    e.set_defaults(func=_cmd_eval)

    v = sub.add_parser("verify", help="numerical checks: estimator identities or bounds")
    v.add_argument("--mode", choices=("equivalence", "bounds"), default="equivalence")
    v.add_argument("--out", required=True)
    v.add_argument("--model", help="trained model (bounds mode)")
    v.add_argument("--data", help="dataset directory (bounds mode)")
    v.add_argument("--rays", type=int, default=16)
    v.add_argument("--samples", type=int, default=64)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=_cmd_verify)

    c = sub.add_parser("compare", help="paired training runs: classic vs integrated")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    c.add_argument("--renderer-a", default="classic", dest="renderer_a")
    c.add_argument("--renderer-b", default="linerf", dest="renderer_b")
    c.add_argument("--eval-samples", type=int, default=64, dest="eval_samples")
    c.add_argument("--threads", type=int, default=None)
    _add_train_flags(c)
    c.set_defaults(func=_cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LinerfError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
