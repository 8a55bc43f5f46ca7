"""Brute-force reference computations.

Nothing here reuses the closed forms it is meant to check: frustum points
come from inverse-CDF or rejection sampling, expectations are sample means,
gradients are central differences and volume rendering is integrated on a
fine grid. ``run_checks`` bundles them into the report behind ``verify``.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats

from . import encoding as enc
from . import geometry
from . import rng as rng_mod
from .geometry import ConicalFrustum, Ray


@dataclass(frozen=True)
class McEstimate:
    mean: np.ndarray
    standard_error: np.ndarray
    n_samples: int

    def z_scores(self, expected):
        diff = np.abs(np.asarray(expected, dtype=np.float64) - self.mean)
        zero = self.standard_error == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            z = diff / np.where(zero, 1.0, self.standard_error)
        # A zero-variance estimate is exact: any mismatch is infinitely significant.
        return np.where(zero, np.where(diff == 0, 0.0, np.inf), z)


def _pairwise_sum(x):
    # Fixed-order tree reduction along axis 0 so the result never depends on chunking.
    x = np.asarray(x, dtype=np.float64)
    while x.shape[0] > 1:
        if x.shape[0] % 2:
            x = np.concatenate([x, np.zeros((1,) + x.shape[1:])], axis=0)
        x = x[0::2] + x[1::2]
    return x[0]


def mc_expectation(sampler, fn, n, rng, chunk=1 << 17):
    """Sample mean and standard error of ``fn(sampler(m, rng))`` over n draws.

    Chunks are merged in a fixed order (count, mean, M2), so the estimate is
    independent of memory pressure only through ``chunk``.
    """
    if n < 2:
        raise ValueError("need at least two samples")
    count, mean, m2 = 0, 0.0, 0.0
    while count < n:
        m = min(chunk, n - count)
        v = np.asarray(fn(sampler(m, rng)), dtype=np.float64).reshape(m, -1)
        c_mean = _pairwise_sum(v) / m
        c_m2 = _pairwise_sum((v - c_mean) ** 2)
        delta = c_mean - mean
        total = count + m
        mean = mean + delta * (m / total)
        m2 = m2 + c_m2 + delta**2 * (count * m / total)
        count = total
    var = m2 / (n - 1)
    return McEstimate(mean, np.sqrt(var / n), n)


def _frame(d):
    """Two unit vectors orthogonal to d and to each other."""
    d = np.asarray(d, dtype=np.float64)
    a = d / np.linalg.norm(d)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(a, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(a, e1)


def _to_world(ray: Ray, t, r, theta):
    e1, e2 = _frame(ray.direction)
    radial = (r * np.cos(theta))[:, None] * e1 + (r * np.sin(theta))[:, None] * e2
    return ray.origin + t[:, None] * ray.direction + radial


def sample_frustum_uniform(f: ConicalFrustum, n, rng):
    """n points uniform in the frustum volume via inverse CDFs in (t, r, theta).

    t has density proportional to t^2 on [t0, t1]; at a given t the radial
    distance has density proportional to r on [0, rdot * t].
    """
    u = rng.random((3, n))
    c0, c1 = f.t0**3, f.t1**3
    t = np.cbrt(c0 + u[0] * (c1 - c0))
    r = f.ray.radius * t * np.sqrt(u[1])
    return _to_world(f.ray, t, r, 2 * np.pi * u[2])


def sample_frustum_rejection(f: ConicalFrustum, n, rng):
    """n points uniform in the frustum by rejection from its bounding cylinder."""
    out = []
    have = 0
    R = f.ray.radius * f.t1
    while have < n:
        m = 2 * (n - have) + 64
        u = rng.random((3, m))
        t = f.t0 + (f.t1 - f.t0) * u[0]
        x = _to_world(f.ray, t, R * np.sqrt(u[1]), 2 * np.pi * u[2])
        keep = x[geometry.frustum_contains(f, x)]
        out.append(keep)
        have += len(keep)
    return np.concatenate(out)[:n]


def sample_cylinder_uniform(ray: Ray, radius, t0, t1, n, rng):
    """n points uniform in the cylinder of given radius around [t0, t1] on the ray."""
    u = rng.random((3, n))
    t = t0 + (t1 - t0) * u[0]
    return _to_world(ray, t, radius * np.sqrt(u[1]), 2 * np.pi * u[2])


def ray_coordinates(ray: Ray, x):
    """(t, perpendicular coordinate 1, perpendicular coordinate 2) of world points."""
    rel = x - ray.origin
    d = ray.direction
    t = rel @ d / (d @ d)
    e1, e2 = _frame(d)
    return t, rel @ e1, rel @ e2


def finite_diff_gradient(loss, arrays, indices, h=1e-4):
    """Central differences of ``loss()`` w.r.t. selected entries.

    ``arrays`` is a list of float64 arrays that ``loss`` reads; ``indices``
    holds (array number, flat index) pairs. Entries are restored afterwards.
    """
    out = np.empty(len(indices))
    for k, (a, i) in enumerate(indices):
        flat = arrays[a].reshape(-1)
        keep = flat[i]
        flat[i] = keep + h
        up = loss()
        flat[i] = keep - h
        down = loss()
        flat[i] = keep
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite loss while perturbing entry {(a, i)}")
        out[k] = (up - down) / (2 * h)
    return out


def volume_render_integral(sigma, color, t_near, t_far, n_steps=10_000):
    """Continuous emission-absorption integral on a fine grid.

    Optical depth is accumulated with the trapezoid rule and the color
    integral int T(t) sigma(t) c(t) dt is taken with the trapezoid rule too.
    Returns (color, opacity).
    """
    t = np.linspace(t_near, t_far, n_steps + 1)
    s = sigma(t)
    c = np.asarray(color(t)).reshape(len(t), -1)
    depth = integrate.cumulative_trapezoid(s, t, initial=0.0)
    T = np.exp(-depth)
    col = integrate.trapezoid((T * s)[:, None] * c, t, axis=0)
    return col, 1.0 - T[-1]


# -- check registry -------------------------------------------------------------

def _mutated_moments(t0, t1):
    """Stable moments with the sign of the variance correction flipped."""
    m = geometry.frustum_moments_stable(t0, t1)
    t_mu = 0.5 * (t0 + t1)
    t_delta = 0.5 * (t1 - t0)
    wrong = t_delta**2 / 3 + 4 * t_delta**4 * (12 * t_mu**2 - t_delta**2) / (15 * (3 * t_mu**2 + t_delta**2) ** 2)
    return geometry.FrustumMoments(m.mu_t, wrong, m.sigma_r2)


def random_frustum(gen, t_mu_range=(0.1, 100.0), ratio_range=(1e-3, 1.0), radius_ratio=(1e-3, 0.2)):
    """Random frustum with log-uniform t_mu, t_delta / t_mu and rdot / t_mu."""
    lu = lambda lo, hi: math.exp(gen.uniform(math.log(lo), math.log(hi)))
    t_mu = lu(*t_mu_range)
    t_delta = t_mu * lu(*ratio_range)
    t_delta = min(t_delta, t_mu * (1 - 1e-9))
    d = gen.normal(size=3)
    d *= gen.uniform(0.5, 2.0) / np.linalg.norm(d)
    # Cone radius over axial distance is rdot / |d|.
    ray = Ray(gen.normal(size=3), d, lu(*radius_ratio) * np.linalg.norm(d))
    return ConicalFrustum(ray, t_mu - t_delta, t_mu + t_delta)


def frustum_moment_check(f: ConicalFrustum, n, rng, moments_fn=geometry.frustum_moments_stable):
    """Largest z-score of (E[t], Var[t], Var[perp]) against the closed form."""
    x = sample_frustum_uniform(f, n, rng)
    t, p1, p2 = ray_coordinates(f.ray, x)
    m = moments_fn(f.t0, f.t1)
    expected = np.array([m.mu_t, m.sigma_t2, m.sigma_r2 * f.ray.radius**2, m.sigma_r2 * f.ray.radius**2])
    t_bar = t.mean()
    vals = np.stack([t, (t - t_bar) ** 2, p1**2, p2**2], axis=1)
    mean = vals.mean(0)
    mean[1] *= n / (n - 1)
    se = vals.std(0, ddof=1) / math.sqrt(n)
    z = np.abs(mean - expected) / se
    return float(z.max()), mean, expected


def _check(name, statistic, tolerance, ok, **extra):
    return {"name": name, "statistic": float(statistic), "tolerance": float(tolerance), "pass": bool(ok), **extra}


# 4 means x 5 variances; var=0 is exact and covered by unit tests instead.
TRIG_GRID = [(mu, var) for mu in (-2.0, 0.3, math.pi / 2, 4.0) for var in (0.05, 0.5, 1.0, 2 * math.log(2), 4.0)]


def run_checks(seed=0, mc_scale=1.0, mutate=None):
    """Run every oracle check; returns a list of report dicts.

    ``mc_scale`` multiplies all Monte-Carlo sample counts (tolerances are in
    standard errors so they stay valid). ``mutate="sigma_t2"`` swaps in a
    sign-flipped variance to prove the moment checks can fail.
    """
    moments_fn = _mutated_moments if mutate == "sigma_t2" else geometry.frustum_moments_stable
    if mutate not in (None, "sigma_t2"):
        raise ValueError(f"unknown mutation {mutate!r}")
    N = lambda n: max(1000, int(n * mc_scale))
    report = []
    gen = rng_mod.stream(seed, rng_mod.ORACLE, "verify")

    # Frustum moments against MC.
    zs = []
    for k in range(10):
        f = random_frustum(gen)
        z, _, _ = frustum_moment_check(f, N(200_000), rng_mod.stream(seed, rng_mod.ORACLE, "moments", k), moments_fn)
        zs.append(z)
    report.append(_check("frustum_moments_mc", max(zs), 5.0, max(zs) <= 5.0, unit="standard errors"))

    # Exact rational values at t0=1, t1=2.
    m = moments_fn(1.0, 2.0)
    rel = max(abs(m.mu_t - 45 / 28) / (45 / 28), abs(m.sigma_t2 - (93 / 35 - (45 / 28) ** 2)) / (93 / 35 - (45 / 28) ** 2))
    report.append(_check("frustum_moments_exact", rel, 1e-9, rel <= 1e-9, unit="relative error"))

    # Stable vs naive where both are well-conditioned.
    worst = 0.0
    for _ in range(100):
        t_mu = math.exp(gen.uniform(math.log(0.1), math.log(100)))
        t_delta = t_mu * gen.uniform(0.01, 1.0) * (1 - 1e-9)
        a = moments_fn(t_mu - t_delta, t_mu + t_delta)
        b = geometry.frustum_moments_naive(t_mu - t_delta, t_mu + t_delta)
        for u, v in ((a.mu_t, b.mu_t), (a.sigma_t2, b.sigma_t2), (a.sigma_r2, b.sigma_r2)):
            worst = max(worst, abs(u - v) / abs(v))
    report.append(_check("stable_vs_naive", worst, 1e-9, worst <= 1e-9, unit="relative error"))

    # Cylinder moments.
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0)
    radius, t0, t1 = 2.0, 0.5, 1.5
    x = sample_cylinder_uniform(ray, radius, t0, t1, N(200_000), rng_mod.stream(seed, rng_mod.ORACLE, "cyl"))
    t, p1, _ = ray_coordinates(ray, x)
    cm = geometry.cylinder_moments(radius, t0, t1)
    vals = np.stack([t, (t - t.mean()) ** 2, p1**2], 1)
    z = np.abs(vals.mean(0) - [cm.mu_t, cm.sigma_t2, cm.sigma_r2]) / (vals.std(0, ddof=1) / math.sqrt(len(t)))
    report.append(_check("cylinder_moments_mc", z.max(), 5.0, z.max() <= 5.0, unit="standard errors"))

    # Inverse-CDF sampler vs rejection sampler.
    f = ConicalFrustum(Ray(np.zeros(3), np.array([0.3, -0.2, 1.1]), 0.15), 1.0, 2.5)
    p = frustum_sampler_chi2(f, N(100_000), seed)
    report.append(_check("frustum_sampler_chi2", p, 1e-3, p > 1e-3, unit="p-value"))

    # Expected sin/cos against 1-D Gaussian MC.
    g = rng_mod.stream(seed, rng_mod.ORACLE, "trig")
    worst = 0.0
    for mu, var in TRIG_GRID:
            est = mc_expectation(lambda m, r: r.normal(mu, math.sqrt(var), m),
                                 lambda s: np.stack([np.sin(s), np.cos(s)], 1), N(100_000), g)
            worst = max(worst, float(est.z_scores(enc.expected_trig(mu, var)).max()))
    report.append(_check("expected_trig_mc", worst, 5.0, worst <= 5.0, unit="standard errors"))

    # IPE against MC of PE under the Gaussian.
    worst = 0.0
    for k in range(5):
        mean = gen.normal(size=3)
        cov = gen.uniform(0.0, 0.5, size=3)
        est = mc_expectation(lambda m, r: mean + r.normal(size=(m, 3)) * np.sqrt(cov),
                             lambda s: enc.positional_encode(s, 4), N(100_000),
                             rng_mod.stream(seed, rng_mod.ORACLE, "ipe", k))
        worst = max(worst, float(est.z_scores(enc.ipe(mean, cov, 4)).max()))
    report.append(_check("ipe_mc", worst, 5.0, worst <= 5.0, unit="standard errors"))

    # Gaussian-vs-frustum PE agreement for a thin cone.
    f = ConicalFrustum(Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.05), 1.0, 1.2)
    region = geometry.frustum_to_gaussian(f)
    est = mc_expectation(lambda m, r: sample_frustum_uniform(f, m, r), lambda s: enc.positional_encode(s, 3),
                         N(200_000), rng_mod.stream(seed, rng_mod.ORACLE, "ipe-frustum"))
    z = float(est.z_scores(enc.integrated_positional_encode(region, 3)).max())
    report.append(_check("ipe_frustum_thin_cone", z, 10.0, z <= 10.0, unit="standard errors"))

    # Compositing against the continuous integral.
    worst = composite_quadrature_error(seed, 5)
    report.append(_check("composite_fine_grid", worst, 1e-3, worst <= 1e-3, unit="absolute color error"))
    return report


def frustum_sampler_chi2(f: ConicalFrustum, n, seed=0, bins=(5, 5, 4)):
    """p-value of a two-sample chi-square test on (t, normalized r^2, angle) histograms."""
    a = sample_frustum_uniform(f, n, rng_mod.stream(seed, rng_mod.ORACLE, "chi2", "icdf"))
    b = sample_frustum_rejection(f, n, rng_mod.stream(seed, rng_mod.ORACLE, "chi2", "reject"))
    edges = [np.linspace(f.t0, f.t1, bins[0] + 1), np.linspace(0, 1, bins[1] + 1),
             np.linspace(-np.pi, np.pi, bins[2] + 1)]

    def hist(x):
        t, p1, p2 = ray_coordinates(f.ray, x)
        rr = (p1**2 + p2**2) / (f.ray.radius * t) ** 2
        h, _ = np.histogramdd(np.stack([t, np.clip(rr, 0, 1), np.arctan2(p2, p1)], 1), bins=edges)
        return h.ravel()

    table = np.stack([hist(a), hist(b)])
    table = table[:, table.sum(0) > 0]
    return float(stats.chi2_contingency(table)[1])


def random_smooth_profile(gen, t_near=2.0, t_far=6.0):
    """A smooth positive density (sum of Gaussian bumps) and a smooth color."""
    k = gen.integers(1, 4)
    centers = gen.uniform(t_near, t_far, k)
    widths = gen.uniform(0.2, 0.8, k)
    heights = gen.uniform(0.2, 3.0, k)
    phase = gen.uniform(0, 2 * np.pi, 3)

    def sigma(t):
        t = np.asarray(t)[..., None]
        return np.sum(heights * np.exp(-0.5 * ((t - centers) / widths) ** 2), -1)

    def color(t):
        t = np.asarray(t)[..., None]
        return 0.5 + 0.4 * np.sin(1.3 * t + phase)

    return sigma, color


def composite_quadrature_error(seed, n_profiles, n_intervals=512, t_near=2.0, t_far=6.0):
    """Max color error of midpoint compositing against the fine-grid integral."""
    from .renderer import composite
    gen = rng_mod.stream(seed, rng_mod.ORACLE, "profiles")
    worst = 0.0
    for _ in range(n_profiles):
        sigma, color = random_smooth_profile(gen, t_near, t_far)
        t = np.linspace(t_near, t_far, n_intervals + 1)
        mid = 0.5 * (t[1:] + t[:-1])
        c, _, _ = composite(sigma(mid), color(mid), t)
        ref, _ = volume_render_integral(sigma, color, t_near, t_far)
        worst = max(worst, float(np.abs(c - ref).max()))
    return worst
