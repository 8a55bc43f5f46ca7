"""Cone-traced volume rendering with hierarchical resampling.

A render pass takes interval edges ``t`` (B, n+1), turns every interval into
a Gaussian, encodes it, queries the field and alpha-composites the result.
The fine pass resamples ``n_fine + 1`` edges from the blurred coarse weights
and is rendered on its own (no union with the coarse edges), except in the
two-MLP ablation where the sorted union is used.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import encoding as enc
from . import geometry
from . import rng as rng_mod


@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 128
    n_fine: int = 128
    alpha: float = 0.01
    supersample_count: int = 1
    white_background: bool = False
    shape: str = "cone"

    def __post_init__(self):
        if self.n_coarse < 1 or self.n_fine < 1:
            raise ValueError("sample counts must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.supersample_count < 1:
            raise ValueError("supersample_count must be >= 1")


@dataclass
class Rays:
    origins: np.ndarray
    directions: np.ndarray
    radii: np.ndarray
    near: np.ndarray
    far: np.ndarray
    # Per-ray direction increments for one pixel step; only used for jitter.
    du: Optional[np.ndarray] = None
    dv: Optional[np.ndarray] = None

    def __len__(self):
        return self.origins.shape[0]

    def take(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return Rays(*(pick(getattr(self, f)) for f in
                       ("origins", "directions", "radii", "near", "far", "du", "dv")))

    @property
    def viewdirs(self):
        return self.directions / np.linalg.norm(self.directions, axis=-1, keepdims=True)

    @classmethod
    def from_camera(cls, camera: geometry.Camera):
        o, d, r = camera.all_rays()
        n = len(r)
        du, dv = camera.pixel_axes()
        return cls(o, d, r, np.full(n, camera.near), np.full(n, camera.far),
                   np.broadcast_to(du, (n, 3)).copy(), np.broadcast_to(dv, (n, 3)).copy())

    def jittered(self, offsets, radius_scale=1.0):
        """Copy with directions moved by pixel-space ``offsets`` (B, 2)."""
        d = self.directions + offsets[:, :1] * self.du + offsets[:, 1:] * self.dv
        return replace(self, directions=d, radii=self.radii * radius_scale)


@dataclass
class FieldModel:
    """One (or, for the ablation, two) MLPs plus how to featurize their input."""

    mlps: list
    encoding: enc.EncodingConfig = field(default_factory=enc.EncodingConfig)
    integrate: bool = True

    @property
    def two_mlps(self):
        return len(self.mlps) == 2

    @property
    def coarse(self):
        return self.mlps[0]

    @property
    def fine(self):
        return self.mlps[-1]

    def param_count(self):
        return sum(m.param_count() for m in self.mlps)


# -- sampling ---------------------------------------------------------------

def stratified_samples(t_near, t_far, n_plus_1, rng=None, batch_shape=()):
    """n+1 sorted values, one uniform draw in each of n+1 equal bins of [t_near, t_far].

    With ``rng=None`` every draw sits at its bin midpoint.
    """
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    if np.any(~(t_near < t_far)):
        raise ValueError("need t_near < t_far")
    shape = np.broadcast_shapes(t_near.shape, tuple(batch_shape)) + (n_plus_1,)
    u = np.full(shape, 0.5) if rng is None else rng.random(shape)
    return t_near[..., None] + (t_far - t_near)[..., None] * (np.arange(n_plus_1) + u) / n_plus_1


def blurpool_weights(w, alpha):
    """Max-then-blur envelope of ``w`` plus ``alpha``, renormalized.

    Weights outside the ray are treated as zero.
    """
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    pad = np.zeros(w.shape[:-1] + (1,))
    wp = np.concatenate([pad, w, pad], axis=-1)
    mx = np.maximum(wp[..., :-1], wp[..., 1:])
    env = 0.5 * (mx[..., :-1] + mx[..., 1:]) + alpha
    total = env.sum(-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("cannot normalize an all-zero weight vector with alpha=0")
    return env / total


def inverse_transform_sample(pdf, edges, n, rng=None, stratified=True):
    """Draw n sorted samples from a piecewise-constant density.

    Args:
        pdf: (..., k) interval probabilities summing to 1.
        edges: (..., k+1) sorted interval edges.
        rng: None gives the deterministic quantiles (i + 0.5) / n.
        stratified: one uniform per 1/n stratum (else i.i.d. sorted uniforms).
    """
    pdf = np.asarray(pdf, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    if np.any(pdf < 0) or not np.allclose(pdf.sum(-1), 1.0, atol=1e-6):
        raise ValueError("pdf must be nonnegative and sum to 1")
    batch = pdf.shape[:-1]
    k = pdf.shape[-1]
    cdf = np.minimum(1.0, np.cumsum(pdf, axis=-1))
    cdf = np.concatenate([np.zeros(batch + (1,)), cdf], axis=-1)
    cdf[..., -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, batch + (n,))
    elif stratified:
        u = (np.arange(n) + rng.random(batch + (n,))) / n
    else:
        u = np.sort(rng.random(batch + (n,)), axis=-1)
    u = np.minimum(u, 1.0 - 1e-12)

    flat_cdf = cdf.reshape(-1, k + 1)
    flat_u = u.reshape(-1, n)
    rows = flat_cdf.shape[0]
    offs = 2.0 * np.arange(rows)[:, None]
    idx = np.searchsorted((flat_cdf + offs).ravel(), (flat_u + offs).ravel(), side="right")
    idx = idx.reshape(rows, n) - np.arange(rows)[:, None] * (k + 1) - 1
    idx = np.clip(idx, 0, k - 1)
    c0 = np.take_along_axis(flat_cdf, idx, -1)
    c1 = np.take_along_axis(flat_cdf, idx + 1, -1)
    flat_edges = edges.reshape(-1, k + 1)
    e0 = np.take_along_axis(flat_edges, idx, -1)
    e1 = np.take_along_axis(flat_edges, idx + 1, -1)
    span = c1 - c0
    frac = np.where(span > 0, (flat_u - c0) / np.where(span > 0, span, 1.0), 0.0)
    t = e0 + np.clip(frac, 0.0, 1.0) * (e1 - e0)
    return t.reshape(batch + (n,))


def _strictly_increasing(t):
    t = np.sort(t, axis=-1)
    for k in range(1, t.shape[-1]):
        t[..., k] = np.maximum(t[..., k], np.nextafter(t[..., k - 1], np.inf))
    return t


# -- compositing -------------------------------------------------------------

def composite(tau, rgb, t, white_background=False):
    """Alpha-composite densities (..., n) and colors (..., n, 3) over edges (..., n+1).

    Returns color (..., 3), weights (..., n) and transmittances (..., n+1),
    where the last transmittance is what reaches the background.
    """
    tau = np.asarray(tau)
    if np.any(tau < 0):
        raise ValueError("densities must be nonnegative")
    if t.shape[-1] != tau.shape[-1] + 1 or rgb.shape[:-1] != tau.shape:
        raise ValueError("need n+1 edges and n colors for n densities")
    delta = t[..., 1:] - t[..., :-1]
    tau_delta = tau * delta
    alpha = 1.0 - np.exp(-tau_delta)
    acc = np.cumsum(tau_delta, axis=-1)
    trans = np.exp(-np.concatenate([np.zeros(acc.shape[:-1] + (1,)), acc], axis=-1))
    w = trans[..., :-1] * alpha
    color = np.sum(w[..., None] * rgb, axis=-2)
    if white_background:
        color = color + trans[..., -1:]
    return color, w, trans


def composite_backward(d_color, tau, rgb, t, w, trans, white_background=False):
    """Gradients of the composited color w.r.t. densities and colors."""
    delta = t[..., 1:] - t[..., :-1]
    d_rgb = w[..., None] * d_color[..., None, :]
    wc = np.einsum("...k,...kc,...c->...k", w, rgb, d_color)
    # Contribution of everything strictly behind interval k.
    behind = np.cumsum(wc[..., ::-1], axis=-1)[..., ::-1] - wc
    if white_background:
        behind = behind + (trans[..., -1] * d_color.sum(-1))[..., None]
    front = trans[..., 1:] * np.einsum("...kc,...c->...k", rgb, d_color)
    d_tau = delta * (front - behind)
    return d_tau, d_rgb


# -- featurization and render passes ------------------------------------------

def featurize(rays: Rays, t, model: FieldModel, shape="cone", dtype=np.float64):
    """Spatial features (B, n, dim) for the intervals of ``t`` (B, n+1)."""
    variant = model.encoding.variant
    if not model.integrate or variant == "PE":
        mid = 0.5 * (t[..., 1:] + t[..., :-1])
        x = rays.origins[:, None, :] + mid[..., None] * rays.directions[:, None, :]
        return enc.positional_encode(x, model.encoding.L, dtype)
    means, cov_diag = geometry.cone_gaussians(rays.origins, rays.directions, rays.radii, t, shape)
    if variant == "IPE":
        return enc.ipe(means, cov_diag, model.encoding.L, dtype)
    # ConcatPE: rebuild the full covariance of each interval.
    m = geometry.frustum_moments_stable(t[..., :-1], t[..., 1:])
    d = rays.directions[:, None, :]
    ddt = d[..., :, None] * d[..., None, :]
    sr2 = (m.sigma_r2 * rays.radii[:, None] ** 2)[..., None, None]
    cov = m.sigma_t2[..., None, None] * ddt + sr2 * (np.eye(3) - ddt / np.sum(d * d, -1)[..., None, None])
    mean_pe = enc.positional_encode(means, enc.CONCAT_MEAN_L)
    cov_pe = enc.positional_encode(enc.triu_signed_sqrt(cov), enc.CONCAT_COV_L)
    return np.concatenate([mean_pe, cov_pe], axis=-1)


@dataclass
class PassResult:
    t: np.ndarray
    tau: np.ndarray
    rgb: np.ndarray
    color: np.ndarray
    weights: np.ndarray
    trans: np.ndarray
    cache: dict


def render_pass(mlp, rays, t, model, config, view_enc):
    feats = featurize(rays, t, model, config.shape, mlp.dtype)
    tau, rgb, cache = mlp.forward(feats, view_enc)
    if not (np.isfinite(tau).all() and np.isfinite(rgb).all()):
        raise FloatingPointError("field produced non-finite density or color")
    tau64 = tau.astype(np.float64)
    rgb64 = rgb.astype(np.float64)
    color, w, trans = composite(tau64, rgb64, t, config.white_background)
    return PassResult(t, tau64, rgb64, color, w, trans, cache)


def pass_backward(mlp, res: PassResult, d_color, config, grads):
    d_tau, d_rgb = composite_backward(d_color, res.tau, res.rgb, res.t, res.weights, res.trans,
                                      config.white_background)
    return mlp.backward(res.cache, d_tau, d_rgb, grads)


def coarse_edges(rays, model, config, rng):
    n = config.n_coarse // 2 if model.two_mlps else config.n_coarse
    return stratified_samples(rays.near, rays.far, max(n, 1) + 1, rng)


def fine_edges(coarse: PassResult, model, config, rng, stratified=True):
    pdf = blurpool_weights(coarse.weights, config.alpha)
    t = inverse_transform_sample(pdf, coarse.t, config.n_fine + 1, rng, stratified)
    if model.two_mlps:
        t = np.concatenate([coarse.t, t], axis=-1)
    return _strictly_increasing(t)


def render_rays(model: FieldModel, rays: Rays, config: RenderConfig, rng=None, t_fine=None):
    """Coarse and fine passes for a batch of rays.

    ``t_fine`` overrides the resampled fine edges (used to hold sampling
    fixed while differentiating). Gradients never flow through sampling.
    """
    view_enc = enc.positional_encode(rays.viewdirs, model.encoding.L_dir)
    t_c = coarse_edges(rays, model, config, rng)
    coarse = render_pass(model.coarse, rays, t_c, model, config, view_enc)
    if t_fine is None:
        t_fine = fine_edges(coarse, model, config, rng)
    fine = render_pass(model.fine, rays, t_fine, model, config, view_enc)
    return coarse, fine


def render_pixel(model, camera, row, col, config, rng=None):
    """(coarse color, fine color) for one pixel."""
    ray = geometry.pixel_cone(camera, row, col)
    du, dv = camera.pixel_axes()
    rays = Rays(ray.origin[None], ray.direction[None], np.array([ray.radius]),
                np.array([camera.near]), np.array([camera.far]), du[None], dv[None])
    return _render_supersampled(model, rays, config, rng, jitter="uniform")


def _render_supersampled(model, rays, config, rng, jitter="uniform"):
    k = config.supersample_count
    if k == 1:
        c, f = render_rays(model, rays, config, rng)
        return c.color, f.color
    scale = 1.0 / np.sqrt(k)
    if jitter == "centered":
        offsets = np.zeros((k, len(rays), 2))
    else:
        gen = rng if rng is not None else rng_mod.stream(0, rng_mod.RENDER, "jitter")
        offsets = gen.uniform(-0.5, 0.5, size=(k, len(rays), 2))
    coarse = np.zeros((len(rays), 3))
    fine = np.zeros((len(rays), 3))
    for s in range(k):
        c, f = render_rays(model, rays.jittered(offsets[s], scale), config, rng)
        coarse += c.color
        fine += f.color
    return coarse / k, fine / k


def render_image(model, camera, config, seed=0, image_key=0, chunk=2048, randomized=False):
    """Render every pixel of ``camera``; returns (coarse, fine) images (H, W, 3).

    Evaluation renders are deterministic (``randomized=False``). Supersample
    jitter offsets come from a stream keyed by (seed, image_key), drawn for
    the whole image up front so chunking never changes the result.
    """
    rays = Rays.from_camera(camera)
    n = len(rays)
    k = config.supersample_count
    offsets = None
    if k > 1:
        offsets = rng_mod.stream(seed, rng_mod.RENDER, "jitter", image_key).uniform(-0.5, 0.5, (k, n, 2))
    coarse = np.zeros((n, 3))
    fine = np.zeros((n, 3))
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        sub = rays.take(sl)
        gen = rng_mod.stream(seed, rng_mod.RENDER, image_key, start) if randomized else None
        if k == 1:
            c, f = render_rays(model, sub, config, gen)
            coarse[sl], fine[sl] = c.color, f.color
            continue
        for s in range(k):
            c, f = render_rays(model, sub.jittered(offsets[s, sl], 1.0 / np.sqrt(k)), config, gen)
            coarse[sl] += c.color / k
            fine[sl] += f.color / k
    shape = (camera.height, camera.width, 3)
    return coarse.reshape(shape), fine.reshape(shape)
