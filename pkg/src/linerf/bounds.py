"""Second-order error analysis for the two color estimators.

For one ray with simplex weights w_i over per-sample features h_i, expand the
color decoder f around a reference feature h_*. The second-order terms are

    t2_classic = 1/2 sum_i w_i  dh_i^T H dh_i       (decode per sample)
    t2_ours    = 1/2 (sum_i w_i dh_i)^T H (sum_i w_i dh_i)   (decode once)

with dh_i = h_i - h_* and H the decoder Hessian at h_*. Both are bounded by
the norm-based estimates u_* built from ||H||_2 and ||dh_i||, and Jensen's
inequality gives u_classic >= u_ours for any sub-probability weights. This
module computes H by batched central finite differences, ||H||_2 by power
iteration, and packages per-ray reports plus the dominance checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError, VerificationError
from .field import FieldModel, apply_h1, field_h_split
from .render import EPS_FG, compute_weights

# ------------------------------------------------------------- FD Hessian


def _hessian_points(x, steps):
    """Evaluation points for one central-difference Hessian pass.

    Layout: [center, +e_i, -e_i (diag pairs), then per (i<j) the four corner
    points ++, +-, -+, --]. Returns (points (P,F), pair index list).
    """
    f = x.shape[0]
    rows = [x]
    for i in range(f):
        e = np.zeros(f)
        e[i] = steps[i]
        rows.append(x + e)
        rows.append(x - e)
    pairs = [(i, j) for i in range(f) for j in range(i + 1, f)]
    for i, j in pairs:
        ei = np.zeros(f)
        ej = np.zeros(f)
        ei[i] = steps[i]
        ej[j] = steps[j]
        rows.append(x + ei + ej)
        rows.append(x + ei - ej)
        rows.append(x - ei + ej)
        rows.append(x - ei - ej)
    return np.stack(rows), pairs


def _hessian_single(f, x, steps):
    points, pairs = _hessian_points(x, steps)
    vals = np.asarray(f(points), dtype=np.float64)
    if vals.ndim == 1:
        vals = vals[:, None]
    n = x.shape[0]
    c = vals.shape[1]
    h = np.zeros((c, n, n))
    center = vals[0]
    for i in range(n):
        plus, minus = vals[1 + 2 * i], vals[2 + 2 * i]
        h[:, i, i] = (plus - 2.0 * center + minus) / steps[i] ** 2
    base = 1 + 2 * n
    for k, (i, j) in enumerate(pairs):
        pp = vals[base + 4 * k]
        pm = vals[base + 4 * k + 1]
        mp = vals[base + 4 * k + 2]
        mm = vals[base + 4 * k + 3]
        val = (pp - pm - mp + mm) / (4.0 * steps[i] * steps[j])
        h[:, i, j] = val
        h[:, j, i] = val
    return h


def hessian_fd(f, x, step=1e-3, richardson=True):
    """Hessian of `f` at `x` by batched central differences.

    `f` maps a batch of points (P, F) to values (P,) or (P, C). Steps scale
    per coordinate with max(1, |x_i|). With `richardson`, combines estimates
    at step and step/2 as (4*H_half - H_full)/3 and reports their spread.

    Returns (hessian, diagnostics): hessian (F, F) for scalar f, else
    (C, F, F); diagnostics has "step", "evals", "richardson_delta".
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError(f"hessian_fd expects a single point (F,), got {x.shape}")
    if step <= 0:
        raise InputError(f"fd step must be positive, got {step}")
    steps = step * np.maximum(1.0, np.abs(x))
    h_full = _hessian_single(f, x, steps)
    if not np.all(np.isfinite(h_full)):
        raise VerificationError(
            f"non-finite finite-difference hessian entries at step {step:g} "
            f"(coordinate steps {float(steps.min()):.3g}..{float(steps.max()):.3g})"
        )
    diag = {"step": float(step), "evals": 1 + 2 * x.size + 2 * x.size * (x.size - 1)}
    if richardson:
        h_half = _hessian_single(f, x, steps / 2.0)
        diag["evals"] *= 2
        diag["richardson_delta"] = float(np.max(np.abs(h_half - h_full)))
        h_full = (4.0 * h_half - h_full) / 3.0
    else:
        diag["richardson_delta"] = 0.0
    scalar = h_full.shape[0] == 1
    return (h_full[0] if scalar else h_full), diag


def spectral_norm(h, iters=200, tol=1e-10):
    """Largest singular value of a symmetric matrix by power iteration.

    Iterates on h @ h, which is positive semidefinite, so a dominant
    negative eigenvalue cannot stall convergence by flipping the sign of
    the iterate every step.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise InputError(f"spectral_norm expects a square matrix, got {h.shape}")
    n = h.shape[0]
    v = np.arange(1.0, n + 1.0)
    v /= np.linalg.norm(v)
    est = 0.0
    for k in range(iters):
        w = h @ (h @ v)
        nw = float(np.linalg.norm(w))
        if nw < 1e-300:
            # started in (or fell into) the kernel: nudge along a basis vector
            v = np.zeros(n)
            v[k % n] = 1.0
            continue
        cur = math.sqrt(nw)
        if abs(cur - est) <= tol * max(1.0, cur):
            return cur
        est = cur
        v = w / nw
    return est


# -------------------------------------------------------------- Taylor terms


@dataclass
class PerturbationSet:
    """Reference feature, per-sample offsets, and sub-probability weights."""

    h_star: np.ndarray
    deltas: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.h_star = np.asarray(self.h_star, dtype=np.float64)
        self.deltas = np.atleast_2d(np.asarray(self.deltas, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.h_star.ndim != 1:
            raise InputError(f"h_star must be (F,), got {self.h_star.shape}")
        if self.deltas.shape[1] != self.h_star.shape[0]:
            raise InputError(
                f"deltas width {self.deltas.shape[1]} != feature dim {self.h_star.shape[0]}"
            )
        if self.weights.shape != (self.deltas.shape[0],):
            raise InputError("need one weight per delta row")
        if np.any(self.weights < -1e-12):
            raise InputError("weights must be nonnegative")
        if self.weights.sum() > 1.0 + 1e-9:
            raise InputError(f"weights sum {self.weights.sum()} exceeds 1")

    @property
    def entropy(self):
        w = self.weights[self.weights > 0]
        if w.size == 0:
            return 0.0
        return float(-np.sum(w * np.log(w)))


def taylor_terms(pert, hessian):
    """Second-order terms of both estimators for one output channel."""
    hessian = np.asarray(hessian, dtype=np.float64)
    d, w = pert.deltas, pert.weights
    t2_classic = 0.5 * float(np.einsum("n,nf,fg,ng->", w, d, hessian, d))
    m = w @ d
    t2_ours = 0.5 * float(m @ hessian @ m)
    return t2_classic, t2_ours


def upper_bounds(pert, hnorm):
    """Norm-based bounds on the second-order terms for one channel.

    With u_i = sqrt(hnorm) * ||dh_i||: u_classic = 1/2 sum w u^2 and
    u_ours = 1/2 (sum w u)^2; |t2| <= u holds for each estimator.
    """
    if hnorm < 0:
        raise InputError(f"hessian norm must be nonnegative, got {hnorm}")
    norms = np.linalg.norm(pert.deltas, axis=1)
    u = np.sqrt(hnorm) * norms
    u_classic = 0.5 * float(pert.weights @ (u**2))
    u_ours = 0.5 * float(pert.weights @ u) ** 2
    return u_classic, u_ours


# ---------------------------------------------------------- synthetic decoders


@dataclass
class QuadraticDecoder:
    """f_c(h) = a_c + b_c.h + 1/2 h^T Q_c h; its Hessian is exactly Q_c."""

    a: np.ndarray
    b: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.atleast_2d(np.asarray(self.b, dtype=np.float64))
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.q.ndim == 2:
            self.q = self.q[None]
        c, f = self.b.shape
        if self.a.shape != (c,) or self.q.shape != (c, f, f):
            raise InputError("decoder coefficient shapes disagree")
        asym = np.max(np.abs(self.q - np.swapaxes(self.q, 1, 2)))
        if asym > 1e-9:
            raise InputError(f"quadratic term must be symmetric (asymmetry {asym:.2e})")

    @property
    def feature_dim(self):
        return self.b.shape[1]

    def decode(self, h):
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        return self.a + h @ self.b.T + 0.5 * np.einsum("nf,cfg,ng->nc", h, self.q, h)

    def gradient(self, h):
        """Exact jacobian d f_c / dh at a single point, shape (C, F)."""
        h = np.asarray(h, dtype=np.float64)
        return self.b + np.einsum("cfg,g->cf", self.q, h)

    def hessians(self):
        return self.q.copy()


def affine_decoder(a, b):
    """Quadratic decoder with zero curvature: the estimators agree exactly."""
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    c, f = b.shape
    return QuadraticDecoder(a=np.asarray(a, dtype=np.float64), b=b, q=np.zeros((c, f, f)))


def taylor_exactness_check(decoder, pert):
    """For a quadratic decoder the second-order expansion is exact.

    Requires simplex weights (sum 1). Checks that the estimator gap
    mean_w f(h_*+dh) - f(h_* + mean_w dh) equals t2_classic - t2_ours.
    Returns a dict with both gaps and their max abs difference.
    """
    if abs(pert.weights.sum() - 1.0) > 1e-9:
        raise InputError("exactness check needs normalized (simplex) weights")
    pts = pert.h_star + pert.deltas
    classic = pert.weights @ decoder.decode(pts)
    mean_delta = pert.weights @ pert.deltas
    ours = decoder.decode(pert.h_star + mean_delta)[0]
    gap = classic - ours
    terms = np.array([taylor_terms(pert, q) for q in decoder.hessians()])
    t2_classic, t2_ours = terms[:, 0], terms[:, 1]
    taylor_gap = t2_classic - t2_ours
    # order-0..2 reconstruction of each estimator; exact for quadratics
    base = decoder.decode(pert.h_star)[0]
    linear = decoder.gradient(pert.h_star) @ mean_delta
    classic_residual = classic - (base + linear + t2_classic)
    ours_residual = ours - (base + linear + t2_ours)
    worst = max(
        np.max(np.abs(gap - taylor_gap)),
        np.max(np.abs(classic_residual)),
        np.max(np.abs(ours_residual)),
    )
    return {
        "gap": gap,
        "taylor_gap": taylor_gap,
        "classic_residual": classic_residual,
        "ours_residual": ours_residual,
        "error": float(worst),
    }


# -------------------------------------------------------------- ray reports


@dataclass
class BoundReport:
    """Per-ray Taylor terms and bounds, one entry per color channel."""

    ray_index: int
    n_samples: int
    lambda_sum: float
    entropy: float
    hnorm: np.ndarray
    t2_classic: np.ndarray
    t2_ours: np.ndarray
    u_classic: np.ndarray
    u_ours: np.ndarray
    fd_diagnostics: dict

    @property
    def jensen_margin(self):
        return self.u_classic - self.u_ours


REPORT_FIELDS = (
    "ray", "channel", "lambda_sum", "lambda_entropy",
    "t2_classic", "t2_ours", "u_classic", "u_ours", "jensen_margin",
)


def report_rows(reports):
    """Flatten reports to per-channel dicts matching REPORT_FIELDS."""
    rows = []
    for rep in reports:
        for c in range(3):
            rows.append({
                "ray": rep.ray_index,
                "channel": "rgb"[c],
                "lambda_sum": rep.lambda_sum,
                "lambda_entropy": rep.entropy,
                "t2_classic": rep.t2_classic[c],
                "t2_ours": rep.t2_ours[c],
                "u_classic": rep.u_classic[c],
                "u_ours": rep.u_ours[c],
                "jensen_margin": rep.jensen_margin[c],
            })
    return rows


def _model_decoder(model, direction):
    """Closure mapping integration-space features to rgb for a fixed direction."""
    def decode(batch):
        batch = np.atleast_2d(np.asarray(batch, dtype=model.dtype))
        h = apply_h1(model, batch, model.split_index)
        return model.decode_color(h, direction)
    return decode


def ray_bound_report(field, origin, direction, t, deltas, ray_index=0,
                     step=1e-3, richardson=True):
    """Build a BoundReport for one ray, or None when it sees only background.

    Features live in the integration space: for a split model that is the
    activation at the split point, and the decoder closure is the remaining
    trunk followed by the color head.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    xs = origin[None, :] + t[:, None] * direction[None, :]
    if isinstance(field, FieldModel):
        feats = field_h_split(field, xs, field.split_index)
        _, sigma = field.query(xs)
        decode = _model_decoder(field, direction)
    else:
        feats, sigma = field.query(xs)
        decode = lambda batch: field.decode_color(batch, direction)
    w = compute_weights(np.asarray(sigma, dtype=np.float64), deltas)
    if w.lambda_fg <= EPS_FG:
        return None
    lam_hat = w.weights / w.lambda_fg
    star = int(np.argmax(w.weights))
    feats = np.asarray(feats, dtype=np.float64)
    pert = PerturbationSet(
        h_star=feats[star], deltas=feats - feats[star], weights=lam_hat
    )
    hs, diag = hessian_fd(decode, pert.h_star, step=step, richardson=richardson)
    hnorm = np.array([spectral_norm(h) for h in hs])
    t2c, t2o, uc, uo = (np.zeros(3) for _ in range(4))
    for c in range(3):
        t2c[c], t2o[c] = taylor_terms(pert, hs[c])
        uc[c], uo[c] = upper_bounds(pert, hnorm[c])
    return BoundReport(
        ray_index=ray_index,
        n_samples=int(t.shape[0]),
        lambda_sum=float(w.lambda_fg),
        entropy=pert.entropy,
        hnorm=hnorm,
        t2_classic=t2c,
        t2_ours=t2o,
        u_classic=uc,
        u_ours=uo,
        fd_diagnostics=diag,
    )


def bound_reports_for_rays(field, origins, dirs, near, far, n_samples,
                           step=1e-3, richardson=True):
    """Midpoint-sampled reports for a batch of rays; background rays skipped."""
    from .render import stratified_sample, Ray

    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    reports = []
    for i in range(origins.shape[0]):
        ray = Ray(origins[i], dirs[i], near, far)
        batch = stratified_sample(ray, n_samples)
        rep = ray_bound_report(
            field, origins[i], dirs[i], batch.t, batch.deltas,
            ray_index=i, step=step, richardson=richardson,
        )
        if rep is not None:
            reports.append(rep)
    return reports


def verify_bound_dominance(reports, jensen_tol=1e-12, bound_tol=1e-9):
    """Check u_classic >= u_ours and |t2| <= u on every report channel.

    Returns (ok, violations): violations are human-readable strings. Raises
    VerificationError when called with nothing to check.
    """
    if not reports:
        raise VerificationError("no foreground rays to verify bounds on")
    violations = []
    for rep in reports:
        for c in range(3):
            ch = "rgb"[c]
            if rep.jensen_margin[c] < -jensen_tol:
                violations.append(
                    f"ray {rep.ray_index} channel {ch}: "
                    f"u_classic - u_ours = {rep.jensen_margin[c]:.3e} < -{jensen_tol}"
                )
            if abs(rep.t2_classic[c]) > rep.u_classic[c] * (1 + 1e-9) + bound_tol:
                violations.append(
                    f"ray {rep.ray_index} channel {ch}: |t2_classic| "
                    f"{abs(rep.t2_classic[c]):.3e} exceeds bound {rep.u_classic[c]:.3e}"
                )
            if abs(rep.t2_ours[c]) > rep.u_ours[c] * (1 + 1e-9) + bound_tol:
                violations.append(
                    f"ray {rep.ray_index} channel {ch}: |t2_ours| "
                    f"{abs(rep.t2_ours[c]):.3e} exceeds bound {rep.u_ours[c]:.3e}"
                )
    return (not violations), violations
