"""Volume rendering estimators over a sampled ray.

Three renderers share one quadrature: per-sample weights
lambda_i = T_i * (1 - exp(-sigma_i * delta_i)).

  classic   C  = sum_i lambda_i * f_c(h_i, d) + (1 - Lambda) * C_bg
  linerf    C' = Lambda * f_c(sum_i (lambda_i/Lambda) h_i, d) + (1 - Lambda) * C_bg
  split:k   as linerf, but integrating the intermediate feature h2 (activation
            after k trunk layers; k=0 is the raw positional encoding) and
            applying the remaining layers h1 once per ray before the color head

where Lambda = sum_i lambda_i. Rays whose Lambda falls at or below EPS_FG
return the background exactly and never invoke the decoder. A renderer "field"
is anything with query(xs) -> (features, sigmas), decode_color(features, dirs)
and a background attribute; FieldModel and the analytic scene fields both
qualify. Gradients (render_rays_grad) exist for FieldModel only.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import field as field_mod
from .errors import ConfigurationError, InputError
from .field import Background, FieldModel, ModelGrads, encode_direction, split_trunk
from .net import NetGrads, net_backward, net_forward

# Foreground mass at or below this renders the background exactly.
EPS_FG = 1e-6

__all__ = [
    "EPS_FG", "Ray", "SampleBatch", "RenderWeights", "RenderConfig", "Background",
    "stratified_sample", "compute_weights", "render_classic", "render_linerf",
    "render_split", "ray_embedding", "render_rays", "render_rays_grad",
    "render_image", "parse_renderer", "resolve_threads",
]


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if self.origin.shape != (3,) or self.direction.shape != (3,):
            raise InputError("ray origin/direction must be 3-vectors")
        if not (np.all(np.isfinite(self.origin)) and np.all(np.isfinite(self.direction))):
            raise InputError("ray origin/direction must be finite")
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            raise InputError(f"ray direction must be unit length, |d| = {n:.8f}")
        if not (np.isfinite(self.t_near) and np.isfinite(self.t_far)):
            raise InputError("t range must be finite")
        if not 0.0 <= self.t_near < self.t_far:
            raise InputError(f"need 0 <= t_near < t_far, got [{self.t_near}, {self.t_far})")


@dataclass
class SampleBatch:
    """Ascending sample depths along one ray with quadrature intervals."""

    t: np.ndarray          # (N,)
    deltas: np.ndarray     # (N,), last interval runs to t_far
    positions: np.ndarray  # (N, 3)


@dataclass
class RenderWeights:
    alphas: np.ndarray           # 1 - exp(-sigma * delta)
    transmittances: np.ndarray   # T_i before each sample, T_1 = 1
    weights: np.ndarray          # lambda_i = T_i * alpha_i
    lambda_fg: np.ndarray        # sum of weights (scalar per ray)
    trans_after: np.ndarray      # T_{N+1}, transmittance past the last sample


def _sample_t(near, far, n_samples, rng):
    """Batched sampling: near/far (R,) -> t, deltas (R, N)."""
    if n_samples < 1:
        raise InputError(f"n_samples must be >= 1, got {n_samples}")
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    r = near.shape[0]
    edges = np.linspace(0.0, 1.0, n_samples + 1)
    lo = near[:, None] + (far - near)[:, None] * edges[:-1]
    hi = near[:, None] + (far - near)[:, None] * edges[1:]
    if rng is None:
        t = 0.5 * (lo + hi)
    else:
        t = lo + rng.random((r, n_samples)) * (hi - lo)
    deltas = np.empty_like(t)
    deltas[:, :-1] = t[:, 1:] - t[:, :-1]
    deltas[:, -1] = far - t[:, -1]
    return t, deltas


def stratified_sample(ray, n_samples, rng=None):
    """One sample per uniform bin of [t_near, t_far); rng=None takes bin midpoints."""
    t, deltas = _sample_t(
        np.array([ray.t_near]), np.array([ray.t_far]), n_samples, rng
    )
    positions = ray.origin + t[0][:, None] * ray.direction
    return SampleBatch(t=t[0], deltas=deltas[0], positions=positions)


def compute_weights(sigmas, deltas):
    """Quadrature weights from densities and intervals; shapes (N,) or (R, N)."""
    sigmas = np.asarray(sigmas)
    deltas = np.asarray(deltas)
    if sigmas.shape != deltas.shape:
        raise InputError(f"sigma shape {sigmas.shape} != delta shape {deltas.shape}")
    if np.any(deltas <= 0):
        raise InputError("sample intervals must be positive")
    if np.any(~np.isfinite(sigmas)) or np.any(sigmas < 0):
        raise InputError("densities must be finite and nonnegative")
    squeeze = sigmas.ndim == 1
    sd = np.atleast_2d(sigmas * deltas)
    alphas = -np.expm1(-sd)
    optical = np.cumsum(sd, axis=1)
    trans = np.exp(-np.concatenate([np.zeros((sd.shape[0], 1), sd.dtype), optical[:, :-1]], axis=1))
    weights = trans * alphas
    lam = weights.sum(axis=1)
    after = np.exp(-optical[:, -1])
    if squeeze:
        return RenderWeights(alphas[0], trans[0], weights[0], lam[0], after[0])
    return RenderWeights(alphas, trans, weights, lam, after)


def _weights_backward(w, sigmas, deltas, g_lambda):
    """d(loss)/d(sigma) from d(loss)/d(lambda_i); all (R, N)."""
    # d lambda_i / d sigma_i = T_i * delta_i * exp(-sigma_i delta_i)
    # d lambda_i / d sigma_j = -delta_j * lambda_i   (j < i)
    gl = g_lambda * w.weights
    suffix = np.cumsum(gl[:, ::-1], axis=1)[:, ::-1] - gl
    e = 1.0 - w.alphas
    return deltas * (g_lambda * w.transmittances * e - suffix)


def parse_renderer(name):
    """'classic' | 'linerf' | 'split:<k>' -> (mode, split_index or None)."""
    if name == "classic":
        return "classic", None
    if name == "linerf":
        return "linerf", None
    if name.startswith("split:"):
        try:
            k = int(name.split(":", 1)[1])
        except ValueError:
            raise ConfigurationError(f"bad split index in renderer {name!r}")
        if k < 0:
            raise ConfigurationError(f"split index must be >= 0, got {k}")
        return "split", k
    raise ConfigurationError(
        f"unknown renderer {name!r} (expected classic, linerf, or split:<k>)"
    )


def _background_of(field, override):
    bg = override if override is not None else getattr(field, "background", None)
    if bg is None:
        raise ConfigurationError("field has no background and none was supplied")
    return bg


# ------------------------------------------------------------------ evaluation


def render_rays(field, origins, dirs, t, deltas, renderer="linerf",
                split_index=None, background=None):
    """Render a batch of rays; origins/dirs (R,3), t/deltas (R,N) -> rgb (R,3)."""
    if renderer in ("classic", "linerf", "split"):
        mode, k = renderer, split_index
    else:
        mode, k = parse_renderer(renderer)
    if mode == "split" and split_index is not None:
        k = split_index
    if mode == "split" and k is None:
        raise ConfigurationError("split renderer needs a split index")
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    r, n = t.shape
    xs = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
    bg = np.asarray(_background_of(field, background).color(dirs), dtype=np.float64)

    if mode == "split":
        if not isinstance(field, FieldModel):
            raise ConfigurationError("split renderer requires a FieldModel")
        front, back = split_trunk(field.trunk, k)
        enc = np.asarray(field.encode(xs), dtype=field.dtype)
        a2 = enc if front is None else net_forward(front, enc)[0]
        h = a2 if back is None else net_forward(back, a2)[0]
        sig = field_mod.field_sigma(field, h)
        feats = a2
    else:
        feats, sig = field.query(xs)
        feats = np.asarray(feats)

    w = compute_weights(np.asarray(sig, dtype=np.float64).reshape(r, n), deltas)

    if mode == "classic":
        cols = np.asarray(
            field.decode_color(feats, np.repeat(dirs, n, axis=0)), dtype=np.float64
        ).reshape(r, n, 3)
        return np.einsum("rn,rnc->rc", w.weights, cols) + (1.0 - w.lambda_fg)[:, None] * bg

    feats = feats.reshape(r, n, -1)
    live = w.lambda_fg > EPS_FG
    out = bg.copy()
    if np.any(live):
        lam_hat = w.weights[live] / w.lambda_fg[live, None]
        integrated = np.einsum("rn,rnf->rf", lam_hat, feats[live])
        if mode == "split":
            _, back = split_trunk(field.trunk, k)
            y = integrated if back is None else net_forward(back, integrated.astype(field.dtype))[0]
        else:
            y = integrated
        c = np.asarray(field.decode_color(y, dirs[live]), dtype=np.float64)
        lf = w.lambda_fg[live, None]
        out[live] = lf * c + (1.0 - lf) * bg[live]
    return out


def _single(field, ray, samples, renderer, split_index=None, background=None):
    rgb = render_rays(
        field,
        ray.origin[None, :], ray.direction[None, :],
        samples.t[None, :], samples.deltas[None, :],
        renderer=renderer, split_index=split_index, background=background,
    )
    return rgb[0]


def render_classic(model, ray, samples, background=None):
    """Per-sample decoding: sum_i lambda_i f_c(h_i, d) plus background remainder."""
    return _single(model, ray, samples, "classic", background=background)


def render_linerf(model, ray, samples, background=None):
    """Decode once per ray on the normalized lambda-weighted feature."""
    return _single(model, ray, samples, "linerf", background=background)


def render_split(model, ray, samples, split_index, background=None):
    """Integrate h2, apply h1 per ray, then decode; split at trunk depth == linerf."""
    return _single(model, ray, samples, "split", split_index=split_index,
                   background=background)


def ray_embedding(model, ray, samples):
    """Normalized integrated feature H(r) and the ray direction.

    H = sum_i (lambda_i / Lambda) h_i; the zero vector when Lambda <= EPS_FG.
    """
    feats, sig = model.query(samples.positions)
    feats = np.asarray(feats, dtype=np.float64)
    w = compute_weights(np.asarray(sig, dtype=np.float64), samples.deltas)
    if w.lambda_fg <= EPS_FG:
        return np.zeros(feats.shape[1]), ray.direction
    return (w.weights / w.lambda_fg) @ feats, ray.direction


# ------------------------------------------------------------------- gradients


def render_rays_grad(model, origins, dirs, t, deltas, renderer="linerf",
                     split_index=None, background=None, grad_out=None, targets=None):
    """Forward + hand-rolled backward through the full pipeline.

    Either pass `targets` (R,3) to get MSE loss and its gradients, or
    `grad_out` = dL/d(rgb) directly. Returns (rgb, ModelGrads, loss or None).
    Parameter gradients cover trunk, heads, grid features, and sh background.
    """
    if renderer in ("classic", "linerf", "split"):
        mode, k = renderer, split_index
    else:
        mode, k = parse_renderer(renderer)
    if mode == "split" and split_index is not None:
        k = split_index
    if mode == "split" and k is None:
        raise ConfigurationError("split renderer needs a split index")
    if mode != "split":
        k = model.trunk.depth
    if (grad_out is None) == (targets is None):
        raise ConfigurationError("pass exactly one of grad_out / targets")

    dt = model.dtype
    origins = np.asarray(origins)
    dirs = np.asarray(dirs)
    r, n = t.shape
    xs = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)

    # forward, keeping tapes
    enc_raw, enc_cache = model.encode(xs, want_cache=True)
    enc = np.asarray(enc_raw, dtype=dt)
    front, back = split_trunk(model.trunk, k)
    if front is not None:
        a2, tape_f = net_forward(front, enc)
    else:
        a2, tape_f = enc, None
    if back is not None:
        h, tape_b = net_forward(back, a2)
    else:
        h, tape_b = a2, None
    sig_out, tape_d = net_forward(model.density_head, h)
    sigma = sig_out[:, 0].astype(np.float64).reshape(r, n)
    w = compute_weights(sigma, np.asarray(deltas, dtype=np.float64))

    bg_obj = _background_of(model, background)
    bg = np.asarray(bg_obj.color(dirs), dtype=np.float64)
    enc_d = np.asarray(encode_direction(model.dir_cfg, dirs), dtype=dt)

    live = w.lambda_fg > EPS_FG
    if mode == "classic":
        inp_c = np.concatenate([h, np.repeat(enc_d, n, axis=0)], axis=1)
        cols_flat, tape_c = net_forward(model.color_head, inp_c)
        cols = cols_flat.astype(np.float64).reshape(r, n, 3)
        rgb = np.einsum("rn,rnc->rc", w.weights, cols) + (1.0 - w.lambda_fg)[:, None] * bg
    else:
        f2 = a2.shape[1]
        a2r = a2.reshape(r, n, f2)
        rgb = bg.copy()
        if np.any(live):
            lam_hat = (w.weights[live] / w.lambda_fg[live, None]).astype(dt)
            h2int = np.einsum("rn,rnf->rf", lam_hat, a2r[live])
            if back is not None:
                y, tape_h1 = net_forward(back, h2int)
            else:
                y, tape_h1 = h2int, None
            inp_c = np.concatenate([y, enc_d[live]], axis=1)
            c_live, tape_c = net_forward(model.color_head, inp_c)
            c_live = c_live.astype(np.float64)
            lf = w.lambda_fg[live, None]
            rgb[live] = lf * c_live + (1.0 - lf) * bg[live]

    loss = None
    if targets is not None:
        targets = np.asarray(targets, dtype=np.float64)
        diff = rgb - targets
        loss = float(np.mean(diff * diff))
        grad_out = (2.0 / diff.size) * diff
    go = np.asarray(grad_out, dtype=np.float64)

    # backward
    g_lambda = np.zeros((r, n))
    ga2 = np.zeros_like(a2)
    grads = ModelGrads.zeros_for(model)

    if mode == "classic":
        gc = (w.weights[:, :, None] * go[:, None, :]).reshape(-1, 3).astype(dt)
        cgrads, gin = net_backward(model.color_head, tape_c, gc)
        grads.color.add_(cgrads)
        gh = gin[:, : h.shape[1]].astype(dt)
        g_lambda = np.einsum("rc,rnc->rn", go, cols - bg[:, None, :])
        gbg_rgb = (1.0 - w.lambda_fg)[:, None] * go
    else:
        gh = np.zeros_like(h)
        gbg_rgb = go.copy()
        if np.any(live):
            go_live = go[live]
            gc = (w.lambda_fg[live, None] * go_live).astype(dt)
            cgrads, gin = net_backward(model.color_head, tape_c, gc)
            grads.color.add_(cgrads)
            gy = gin[:, : (y.shape[1])]
            if back is not None:
                bgrads, gh2 = net_backward(back, tape_h1, gy)
                grads_back_ray = bgrads
            else:
                gh2 = gy
                grads_back_ray = None
            gh2_64 = gh2.astype(np.float64)
            h2int_64 = h2int.astype(np.float64)
            a2_live = a2r[live].astype(np.float64)
            # lambda paths: through H2 normalization and through the Lambda blend
            gl_live = (
                np.einsum("rf,rnf->rn", gh2_64, a2_live - h2int_64[:, None, :])
                / w.lambda_fg[live, None]
            )
            gl_live += np.einsum("rc,rc->r", go_live, c_live - bg[live])[:, None]
            g_lambda[live] = gl_live
            ga2_r = np.zeros((r, n, a2.shape[1]), dtype=dt)
            lam_hat64 = w.weights[live] / w.lambda_fg[live, None]
            ga2_r[live] = (lam_hat64[:, :, None] * gh2_64[:, None, :]).astype(dt)
            ga2 += ga2_r.reshape(-1, a2.shape[1])
            lf = w.lambda_fg[live, None]
            gbg_rgb[live] = (1.0 - lf) * go_live
            if grads_back_ray is not None:
                grads_back = grads_back_ray
            else:
                grads_back = None
        else:
            grads_back = None

    # density chain: g_lambda -> g_sigma -> density head -> h
    g_sigma = _weights_backward(w, sigma, np.asarray(deltas, dtype=np.float64), g_lambda)
    dgrads, gh_d = net_backward(
        model.density_head, tape_d, g_sigma.reshape(-1, 1).astype(dt)
    )
    grads.density.add_(dgrads)
    gh = gh + gh_d if mode == "classic" else gh_d

    # per-sample back half of the trunk (h = back(a2)), then the front half
    if back is not None:
        bgrads2, ga2_d = net_backward(back, tape_b, gh)
        ga2 += ga2_d
        back_total = bgrads2
        if mode != "classic" and grads_back is not None:
            back_total.add_(grads_back)
    else:
        ga2 += gh
        back_total = None
        if mode != "classic" and grads_back is not None:
            back_total = grads_back

    if front is not None:
        fgrads, genc = net_backward(front, tape_f, ga2)
        front_total = fgrads
    else:
        genc = ga2
        front_total = None

    # splice front/back gradients into the full trunk layout
    if k == 0:
        trunk_grads = back_total
    elif k == model.trunk.depth:
        trunk_grads = front_total
        if back_total is not None:
            trunk_grads.add_(back_total)  # unreachable; kept for clarity
    else:
        trunk_grads = NetGrads(
            front_total.weights + back_total.weights,
            front_total.biases + back_total.biases,
        )
    grads.trunk.add_(trunk_grads)

    if model.grid_features is not None:
        _, total = model.pos_cfg.level_offsets()
        grads.grid += field_mod.grid_lookup_backward(
            model.pos_cfg, enc_cache, genc.astype(np.float64), total, model.grid_features.dtype
        )
    if bg_obj.kind == "sh" and grads.bg is not None:
        grads.bg += bg_obj.color_grad(dirs, gbg_rgb).astype(grads.bg.dtype)

    return rgb, grads, loss


# ----------------------------------------------------------------- whole images


def resolve_threads(threads=None):
    """Explicit value, else LINERF_THREADS, else the CPU count."""
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("LINERF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"LINERF_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


@dataclass
class RenderConfig:
    renderer: str = "linerf"
    n_samples: int = 64
    near: float = 2.0
    far: float = 6.0
    background: Background = None
    threads: int = None
    chunk_rays: int = 4096


def render_image(model, camera, cfg):
    """Render a camera view with midpoint sampling; deterministic per inputs.

    Rays are processed in fixed-size chunks so the result is independent of
    the worker thread count.
    """
    from . import data as data_mod
    from .scenes import camera_rays

    origins, dirs = camera_rays(camera)
    n_rays = origins.shape[0]
    near = np.full(n_rays, float(cfg.near))
    far = np.full(n_rays, float(cfg.far))
    t, deltas = _sample_t(near, far, cfg.n_samples, rng=None)
    out = np.empty((n_rays, 3))
    chunks = [
        slice(i, min(i + cfg.chunk_rays, n_rays)) for i in range(0, n_rays, cfg.chunk_rays)
    ]

    def run(sl):
        out[sl] = render_rays(
            model, origins[sl], dirs[sl], t[sl], deltas[sl],
            renderer=cfg.renderer, background=cfg.background,
        )

    threads = resolve_threads(cfg.threads)
    if threads == 1 or len(chunks) == 1:
        for sl in chunks:
            run(sl)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, chunks))
    return data_mod.Image(out.reshape(camera.height, camera.width, 3))
