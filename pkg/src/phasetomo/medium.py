"""Refractive-index fields, phantom generators and admissibility checks.

A field is the scalar coefficient n(x) >= 1 that equals 1 (vacuum) outside a
compact support region.  Two representations are provided: analytic radial
phantoms with closed-form derivatives, and grid-sampled fields evaluated
through a C^2 interpolating spline.  Both expose the same vectorized query
API used by the ray tracer: ``values``, ``grad`` and ``hess_log``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import OutOfDomainError

_EPS_PSD_DEFAULT = 1e-8


# ---------------------------------------------------------------------------
# radial profile helpers
# ---------------------------------------------------------------------------

def _cutoff(t):
    """C^2 cutoff: exactly 1 for t <= 1/2, exactly 0 for t >= 1.

    Quintic smoothstep on the transition band, so the first two derivatives
    vanish at both ends and compact support is enforced exactly.
    """
    t = np.asarray(t, dtype=float)
    w = np.ones_like(t)
    w[t >= 1.0] = 0.0
    band = (t > 0.5) & (t < 1.0)
    u = 2.0 * t[band] - 1.0
    w[band] = 1.0 - u ** 3 * (10.0 - 15.0 * u + 6.0 * u ** 2)
    return w


def _cutoff_d1(t):
    t = np.asarray(t, dtype=float)
    d = np.zeros_like(t)
    band = (t > 0.5) & (t < 1.0)
    u = 2.0 * t[band] - 1.0
    d[band] = -60.0 * u ** 2 * (1.0 - u) ** 2
    return d


def _cutoff_d2(t):
    t = np.asarray(t, dtype=float)
    d = np.zeros_like(t)
    band = (t > 0.5) & (t < 1.0)
    u = 2.0 * t[band] - 1.0
    d[band] = -240.0 * u * (1.0 - u) * (1.0 - 2.0 * u)
    return d


def _radial_tensors(points, center, n, dn, d2n):
    """Assemble gradient and Hessian of a radial function from n'(r), n''(r)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    rel = pts - center
    r = np.linalg.norm(rel, axis=1)
    safe = np.where(r > 1e-300, r, 1.0)
    rhat = rel / safe[:, None]

    grad = dn[:, None] * rhat
    grad[r <= 1e-300] = 0.0

    # Hess F = F'' rhat rhat^T + (F'/r) (I - rhat rhat^T); F'/r -> F''(0) at r=0
    ratio = np.where(r > 1e-10, dn / safe, d2n)
    outer = rhat[:, :, None] * rhat[:, None, :]
    eye = np.eye(3)
    hess = d2n[:, None, None] * outer + ratio[:, None, None] * (eye - outer)
    return grad, hess


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

class RefractiveField:
    """Common interface: immutable after construction, safe for concurrent reads."""

    kind = "abstract"

    def values(self, points):
        raise NotImplementedError

    def grad(self, points):
        raise NotImplementedError

    def grad_log(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return self.grad(pts) / self.values(pts)[:, None]

    def value_and_grad(self, points):
        """(n, grad n) together; overridden where a fused path is cheaper."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return self.values(pts), self.grad(pts)

    def hess_log(self, points):
        raise NotImplementedError

    @property
    def support_center(self):
        raise NotImplementedError

    @property
    def support_radius(self):
        raise NotImplementedError

    def sup_n(self):
        """Upper bound for n over the support (sampled)."""
        raise NotImplementedError


class AnalyticPhantom(RefractiveField):
    """Radial analytic phantom with compact support and closed-form derivatives.

    Two profiles:

    * ``gaussian``      n = 1 + epsilon * exp(-r^2/sigma^2) * w(r/R)
    * ``log-quadratic`` n = exp(epsilon * r^2 * w(r/R))

    w is the C^2 cutoff, identically 1 on the inner half of the support ball
    and identically 0 outside it, so n == 1 holds exactly beyond radius R.
    """

    def __init__(self, profile="gaussian", center=(0.0, 0.0, 0.0),
                 epsilon=0.1, sigma=0.5, support_radius=1.0):
        if profile not in ("gaussian", "log-quadratic"):
            raise ValueError(f"unknown profile {profile!r}")
        if epsilon < 0.0:
            raise ValueError("epsilon must be >= 0 so that n >= 1 everywhere")
        self.kind = "analytic-phantom"
        self.profile = profile
        self.center = np.asarray(center, dtype=float)
        self.epsilon = float(epsilon)
        self.sigma = float(sigma)
        self.radius = float(support_radius)
        self._report_cache = {}

    # radial value and first two radial derivatives of n
    def _radial(self, r):
        r = np.asarray(r, dtype=float)
        R = self.radius
        w = _cutoff(r / R)
        w1 = _cutoff_d1(r / R) / R
        w2 = _cutoff_d2(r / R) / R ** 2
        if self.profile == "gaussian":
            s2 = self.sigma ** 2
            g = np.exp(-r ** 2 / s2)
            g1 = -(2.0 * r / s2) * g
            g2 = (4.0 * r ** 2 / s2 ** 2 - 2.0 / s2) * g
            b = g * w
            b1 = g1 * w + g * w1
            b2 = g2 * w + 2.0 * g1 * w1 + g * w2
            n = 1.0 + self.epsilon * b
            return n, self.epsilon * b1, self.epsilon * b2
        # log-quadratic: ln n = eps * r^2 * w
        q = self.epsilon
        ell = q * r ** 2 * w
        ell1 = q * (2.0 * r * w + r ** 2 * w1)
        ell2 = q * (2.0 * w + 4.0 * r * w1 + r ** 2 * w2)
        n = np.exp(ell)
        return n, n * ell1, n * (ell2 + ell1 ** 2)

    def values(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.linalg.norm(pts - self.center, axis=1)
        return self._radial(r)[0]

    def grad(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.linalg.norm(pts - self.center, axis=1)
        n, dn, d2n = self._radial(r)
        return _radial_tensors(pts, self.center, n, dn, d2n)[0]

    def value_and_grad(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.linalg.norm(pts - self.center, axis=1)
        n, dn, d2n = self._radial(r)
        return n, _radial_tensors(pts, self.center, n, dn, d2n)[0]

    def hess_log(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.linalg.norm(pts - self.center, axis=1)
        n, dn, d2n = self._radial(r)
        # d/dr ln n and d2/dr2 ln n, then radial assembly
        l1 = dn / n
        l2 = d2n / n - (dn / n) ** 2
        return _radial_tensors(pts, self.center, n, l1, l2)[1]

    @property
    def support_center(self):
        return self.center

    @property
    def support_radius(self):
        return self.radius

    def sup_n(self):
        r = np.linspace(0.0, self.radius, 512)
        return float(self._radial(r)[0].max())


def vacuum():
    """The trivial field n == 1 (epsilon = 0 phantom)."""
    return AnalyticPhantom(epsilon=0.0, sigma=1.0, support_radius=1.0)


class GridField(RefractiveField):
    """n sampled on a regular axis-aligned grid, interpolated by a cubic spline.

    The interpolant is C^2 (enough for the ray equations and the Hessian
    check); derivatives are central differences of the interpolant.  Queries
    outside the grid return exactly 1 when ``vacuum_extension`` is set and
    raise :class:`OutOfDomainError` otherwise.  The support region must sit
    at least two cells inside the grid so the spline stencil never mixes
    heterogeneous and boundary samples.
    """

    def __init__(self, origin, spacing, values, support_center, support_radius,
                 vacuum_extension=True, order=3, prefilter=True):
        if order < 3:
            raise ValueError("interpolation order must be >= 3 (C^2 needed)")
        self.kind = "grid-sampled"
        self.origin = np.asarray(origin, dtype=float)
        self.spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,)).copy()
        self.grid_values = np.ascontiguousarray(values, dtype=float)
        if self.grid_values.ndim != 3:
            raise ValueError("values must be a 3-D array")
        self.dims = np.array(self.grid_values.shape)
        self._center = np.asarray(support_center, dtype=float)
        self._radius = float(support_radius)
        self.vacuum_extension = bool(vacuum_extension)
        self.order = int(order)
        # prefilter=True interpolates the samples; False treats them as
        # B-spline coefficients (convex, local weights), which is what the
        # tomography model uses so its ray kernel is an exact linearization
        self.prefilter = bool(prefilter)
        if self.prefilter:
            self._coeffs = ndimage.spline_filter(self.grid_values,
                                                 order=self.order, mode="mirror")
        else:
            self._coeffs = self.grid_values
        margin = 2.0 * self.spacing
        lo = self.origin + margin
        hi = self.origin + (self.dims - 1) * self.spacing - margin
        if np.any(self._center - self._radius < lo) or np.any(self._center + self._radius > hi):
            raise ValueError("support region must lie >= 2 cells inside the grid")
        self._report_cache = {}

    def _to_index(self, pts):
        return (pts - self.origin) / self.spacing

    def _inside(self, idx):
        return np.all((idx >= 0.0) & (idx <= self.dims - 1), axis=1)

    def values(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        idx = self._to_index(pts)
        inside = self._inside(idx)
        if not inside.all() and not self.vacuum_extension:
            raise OutOfDomainError("query outside grid and vacuum extension disabled")
        # vacuum is exact outside the support bounding box: skip the spline
        # there so prefilter ringing cannot leak past the declared support
        in_box = np.all(np.abs(pts - self._center) <= self._radius
                        + 2.0 * self.spacing, axis=1)
        active = inside & in_box
        out = np.ones(len(pts))
        if active.any():
            vals = ndimage.map_coordinates(self._coeffs, idx[active].T,
                                           order=self.order, prefilter=False,
                                           mode="mirror")
            # n >= 1 is a model constraint; spline undershoot is below its
            # own interpolation error, so project rather than propagate it.
            out[active] = np.maximum(vals, 1.0)
        return out

    def _grad_stencil(self, pts):
        m = len(pts)
        delta = 0.5 * self.spacing
        stencil = np.empty((6, m, 3))
        for ax in range(3):
            for sgn, slot in ((1.0, 2 * ax), (-1.0, 2 * ax + 1)):
                shifted = pts.copy()
                shifted[:, ax] += sgn * delta[ax]
                stencil[slot] = shifted
        return stencil, delta

    def grad(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        stencil, delta = self._grad_stencil(pts)
        vals = self.values(stencil.reshape(-1, 3)).reshape(6, len(pts))
        g = np.empty((len(pts), 3))
        for ax in range(3):
            g[:, ax] = (vals[2 * ax] - vals[2 * ax + 1]) / (2.0 * delta[ax])
        return g

    def value_and_grad(self, points):
        # single spline pass over the 7-point stencil (hot path in tracing)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m = len(pts)
        stencil, delta = self._grad_stencil(pts)
        allpts = np.concatenate([pts[None, :, :], stencil], axis=0)
        vals = self.values(allpts.reshape(-1, 3)).reshape(7, m)
        g = np.empty((m, 3))
        for ax in range(3):
            g[:, ax] = (vals[1 + 2 * ax] - vals[2 + 2 * ax]) / (2.0 * delta[ax])
        return vals[0], g

    def hess_log(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m = len(pts)
        d = 0.5 * self.spacing
        logn = lambda q: np.log(self.values(q))
        center = logn(pts)
        hess = np.empty((m, 3, 3))
        for i in range(3):
            ei = np.zeros(3)
            ei[i] = d[i]
            hess[:, i, i] = (logn(pts + ei) - 2.0 * center + logn(pts - ei)) / d[i] ** 2
            for j in range(i + 1, 3):
                ej = np.zeros(3)
                ej[j] = d[j]
                mixed = (logn(pts + ei + ej) - logn(pts + ei - ej)
                         - logn(pts - ei + ej) + logn(pts - ei - ej)) / (4.0 * d[i] * d[j])
                hess[:, i, j] = mixed
                hess[:, j, i] = mixed
        return hess

    @property
    def support_center(self):
        return self._center

    @property
    def support_radius(self):
        return self._radius

    def sup_n(self):
        return float(self.grid_values.max())


def sample_to_grid(field, origin, spacing, dims, vacuum_extension=True, order=3):
    """Sample any field onto a regular grid and wrap it as a GridField."""
    origin = np.asarray(origin, dtype=float)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
    axes = [origin[i] + spacing[i] * np.arange(dims[i]) for i in range(3)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = field.values(mesh).reshape(tuple(dims))
    return GridField(origin, spacing, vals, field.support_center,
                     field.support_radius, vacuum_extension=vacuum_extension,
                     order=order)


# ---------------------------------------------------------------------------
# measurement surface
# ---------------------------------------------------------------------------

def fibonacci_sphere(count, radius=1.0, center=(0.0, 0.0, 0.0), phase=0.0):
    """Deterministic, roughly uniform points on a sphere (golden-angle spiral)."""
    center = np.asarray(center, dtype=float)
    i = np.arange(count, dtype=float)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * (i + 0.5) / count
    theta = golden * i + phase
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=1)
    # renormalize so the on-surface invariant holds to machine precision
    pts /= np.linalg.norm(pts, axis=1)[:, None]
    return center + radius * pts


@dataclass(frozen=True)
class SurfaceConfig:
    """Closed measurement surface S with source/receiver points on it.

    Sources and receivers must lie on S (1e-10 of the parameterization) and
    outside the field support; coincident source/receiver pairs are excluded
    from every dataset.
    """

    kind: str                  # "sphere" or "box"
    center: np.ndarray
    radius: float              # sphere radius, or half-diagonal bound for a box
    sources: np.ndarray
    receivers: np.ndarray
    box_min: np.ndarray | None = None
    box_max: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "sources", np.atleast_2d(np.asarray(self.sources, dtype=float)))
        object.__setattr__(self, "receivers", np.atleast_2d(np.asarray(self.receivers, dtype=float)))
        for pts, label in ((self.sources, "source"), (self.receivers, "receiver")):
            err = self._surface_distance(pts)
            if np.any(err > 1e-10):
                raise ValueError(f"{label} points off the surface by {err.max():.2e}")

    def _surface_distance(self, pts):
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(pts - self.center, axis=1) - self.radius)
        if self.kind == "box":
            rel_lo = np.abs(pts - self.box_min)
            rel_hi = np.abs(pts - self.box_max)
            return np.min(np.concatenate([rel_lo, rel_hi], axis=1), axis=1)
        raise ValueError(f"unknown surface kind {self.kind!r}")

    def validate_against(self, field):
        """S must not intersect the support of n - 1."""
        for pts in (self.sources, self.receivers):
            d = np.linalg.norm(pts - field.support_center, axis=1)
            if np.any(d < field.support_radius):
                raise ValueError("measurement point inside the field support")

    def ordered_pairs(self):
        """All (receiver_index, source_index) pairs with x != y."""
        pairs = []
        for j, x in enumerate(self.receivers):
            for i, y in enumerate(self.sources):
                if np.linalg.norm(x - y) > 1e-12:
                    pairs.append((j, i))
        return pairs


def sphere_surface(radius, n_sources, n_receivers, center=(0.0, 0.0, 0.0),
                   layout="antipodal"):
    """Sphere S with golden-spiral sources and receivers.

    ``antipodal`` places receivers opposite a slightly rotated source spiral
    (transmission geometry): the chord impact parameters then cover the
    support from the center outward, which the reconstruction needs.
    ``offset`` keeps both spirals on the same side, giving mostly grazing
    chords; useful for surface-table tests, poor for tomography.
    """
    center = np.asarray(center, dtype=float)
    src = fibonacci_sphere(n_sources, radius, center)
    if layout == "antipodal":
        rcv = center - (fibonacci_sphere(n_receivers, radius, center,
                                         phase=0.15) - center)
    elif layout == "offset":
        rcv = fibonacci_sphere(n_receivers, radius, center, phase=0.5)
    else:
        raise ValueError(f"unknown surface layout {layout!r}")
    return SurfaceConfig(kind="sphere", center=center, radius=radius,
                         sources=src, receivers=rcv)


# ---------------------------------------------------------------------------
# admissibility
# ---------------------------------------------------------------------------

@dataclass
class AdmissibilityReport:
    n00: float
    verdict: str               # "pass" | "fail" | "indeterminate"
    worst_eigenvalue: float
    worst_point: np.ndarray
    eps_psd: float
    check_spacing: float
    points_checked: int = 0


def evaluate(field, point):
    """n at a single point (scalar convenience wrapper)."""
    pt = np.asarray(point, dtype=float)
    if not np.all(np.isfinite(pt)):
        raise ValueError("query point must be finite")
    return float(field.values(pt[None, :])[0])


def gradient_log_n(field, point):
    """grad(ln n) at a single point; the zero vector outside the support."""
    pt = np.asarray(point, dtype=float)
    if not np.all(np.isfinite(pt)):
        raise ValueError("query point must be finite")
    return field.grad_log(pt[None, :])[0]


def _check_grid(center, radius, spacing):
    """Check-grid anchored at the support center so halved spacings nest."""
    count = int(np.floor(radius / spacing))
    offsets = spacing * np.arange(-count, count + 1)
    mesh = np.stack(np.meshgrid(offsets, offsets, offsets, indexing="ij"),
                    axis=-1).reshape(-1, 3)
    mesh = mesh[np.linalg.norm(mesh, axis=1) <= radius + 1e-12]
    return center + mesh


def check_regularity(field, check_grid_spacing, eps_psd=_EPS_PSD_DEFAULT,
                     region_radius=None):
    """Sufficient geodesic-regularity test: Hess(ln n) positive semidefinite.

    Evaluates the Hessian of ln n over a grid covering the support region
    (or the ball of ``region_radius`` about the support center) and reports
    the worst eigenvalue.  ``pass`` requires min eig >= -eps_psd everywhere;
    values far below that give ``fail``; a narrow band just under the
    tolerance, or any non-finite Hessian, gives ``indeterminate``.

    Note this is sufficient, not necessary: weak Gaussian bumps fail it yet
    still have regular geodesics at desk scale, which is why the two-point
    solver accepts a ``force`` override.
    """
    radius = field.support_radius if region_radius is None else float(region_radius)
    key = (float(check_grid_spacing), float(eps_psd), radius)
    cache = getattr(field, "_report_cache", None)
    if cache is not None and key in cache:
        return cache[key]

    pts = _check_grid(field.support_center, radius, float(check_grid_spacing))
    hess = field.hess_log(pts)
    finite = np.all(np.isfinite(hess), axis=(1, 2))
    n00 = max(1.0, field.sup_n()) + 0.01

    if not finite.all():
        bad = pts[~finite][0]
        report = AdmissibilityReport(n00, "indeterminate", float("nan"), bad,
                                     eps_psd, check_grid_spacing, len(pts))
    else:
        eigs = np.linalg.eigvalsh(hess)[:, 0]
        worst_idx = int(np.argmin(eigs))
        worst = float(eigs[worst_idx])
        if worst >= -eps_psd:
            verdict = "pass"
        elif worst >= -1e3 * eps_psd:
            verdict = "indeterminate"   # within numerical noise of the threshold
        else:
            verdict = "fail"
        report = AdmissibilityReport(n00, verdict, worst, pts[worst_idx],
                                     eps_psd, check_grid_spacing, len(pts))
    if cache is not None:
        cache[key] = report
    return report


# ---------------------------------------------------------------------------
# phantom definition files
# ---------------------------------------------------------------------------

def save_field(field, path):
    """Write the phantom definition JSON (plus a .bin sidecar for grids)."""
    path = Path(path)
    if isinstance(field, AnalyticPhantom):
        doc = {
            "kind": "analytic-phantom",
            "profile": field.profile,
            "center": field.center.tolist(),
            "epsilon": field.epsilon,
            "sigma": field.sigma,
            "support_radius": field.radius,
        }
    elif isinstance(field, GridField):
        sidecar = path.with_suffix(".bin")
        field.grid_values.astype("<f8").tofile(sidecar)
        doc = {
            "kind": "grid-sampled",
            "center": field.support_center.tolist(),
            "support_radius": field.support_radius,
            "grid": {
                "origin": field.origin.tolist(),
                "spacing": field.spacing.tolist(),
                "dims": field.dims.tolist(),
            },
            "values_path": sidecar.name,
            "interpolation_order": field.order,
        }
    else:
        raise TypeError(f"cannot serialize field of type {type(field)!r}")
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_field(path):
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc["kind"] == "analytic-phantom":
        return AnalyticPhantom(profile=doc.get("profile", "gaussian"),
                               center=doc["center"], epsilon=doc["epsilon"],
                               sigma=doc["sigma"],
                               support_radius=doc["support_radius"])
    if doc["kind"] == "grid-sampled":
        grid = doc["grid"]
        dims = tuple(grid["dims"])
        values = np.fromfile(path.parent / doc["values_path"],
                             dtype="<f8").reshape(dims)
        return GridField(grid["origin"], grid["spacing"], values,
                         doc["center"], doc["support_radius"],
                         order=doc.get("interpolation_order", 3))
    raise ValueError(f"unknown field kind {doc['kind']!r}")
