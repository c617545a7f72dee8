"""Geodesics of the conformal metric d(tau) = n(x) |dx|.

Rays are integrated as the first-order Hamiltonian system

    dx/ds = p / |p|,     dp/ds = grad n(x),     d(tau)/ds = n(x),

parameterized by Euclidean arc length s, with the constraint |p| = n(x)
serving as an accuracy monitor.  The two-point problem is solved by damped
Newton shooting on (initial direction, arc length), seeded with the straight
chord; the solver is batched over many pairs so a whole source/receiver
table integrates in lockstep.  An independent lattice shortest-path oracle
provides verification values from a different discretization family.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import ConnectionFailure, DatasetError
from .medium import check_regularity

DEFAULT_TOL = 1e-8


def default_step(field):
    """Fixed integrator step: support radius / 200."""
    return field.support_radius / 200.0


# ---------------------------------------------------------------------------
# batched fixed-step RK4 integrator
# ---------------------------------------------------------------------------

def _rhs(field, x, p, lengths):
    n, gn = field.value_and_grad(x)
    pnorm = np.linalg.norm(p, axis=1)
    dx = (lengths / pnorm)[:, None] * p
    dp = lengths[:, None] * gn
    dtau = lengths * n
    return dx, dp, dtau


def integrate_rays(field, origins, directions, lengths, step, record=False):
    """March a batch of rays, each over its own total arc length.

    Every ray is rescaled to the unit parameter interval so the batch shares
    one step count (the longest ray sets it); shorter rays simply integrate
    with finer effective steps.  Returns final positions, slownesses and
    travel times, plus the full node/slowness/tau histories when ``record``.
    """
    x = np.atleast_2d(np.asarray(origins, dtype=float)).copy()
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    lengths = np.atleast_1d(np.asarray(lengths, dtype=float))
    n0 = field.values(x)
    p = d * n0[:, None]                     # |p| = n along the ray
    tau = np.zeros(len(x))

    nsteps = max(1, int(np.ceil(lengths.max() / step)))
    h = 1.0 / nsteps
    if record:
        nodes = np.empty((nsteps + 1, len(x), 3))
        slows = np.empty((nsteps + 1, len(x), 3))
        taus = np.empty((nsteps + 1, len(x)))
        nodes[0], slows[0], taus[0] = x, p, tau

    for k in range(nsteps):
        k1x, k1p, k1t = _rhs(field, x, p, lengths)
        k2x, k2p, k2t = _rhs(field, x + 0.5 * h * k1x, p + 0.5 * h * k1p, lengths)
        k3x, k3p, k3t = _rhs(field, x + 0.5 * h * k2x, p + 0.5 * h * k2p, lengths)
        k4x, k4p, k4t = _rhs(field, x + h * k3x, p + h * k3p, lengths)
        x = x + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        p = p + (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        tau = tau + (h / 6.0) * (k1t + 2.0 * k2t + 2.0 * k3t + k4t)
        if record:
            nodes[k + 1], slows[k + 1], taus[k + 1] = x, p, tau

    if record:
        return x, p, tau, (nodes, slows, taus)
    return x, p, tau


# ---------------------------------------------------------------------------
# paths and tables
# ---------------------------------------------------------------------------

@dataclass
class GeodesicPath:
    """Discretized geodesic from y to x with its travel time."""

    nodes: np.ndarray            # (m, 3), ordered from y to x
    slowness: np.ndarray         # (m, 3), p with |p| = n at each node
    tau: float
    endpoint_residual: float
    iterations: int = 0
    converged: bool = True

    @property
    def segment_lengths(self):
        return np.linalg.norm(np.diff(self.nodes, axis=0), axis=1)

    @property
    def euclidean_length(self):
        return float(self.segment_lengths.sum())

    @property
    def endpoints(self):
        return self.nodes[0].copy(), self.nodes[-1].copy()


@dataclass
class TravelTimeTable:
    """Travel times for ordered (receiver, source) surface pairs."""

    src_idx: np.ndarray
    rcv_idx: np.ndarray
    src: np.ndarray              # (npairs, 3)
    rcv: np.ndarray
    tau: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray
    failed: np.ndarray           # bool
    paths: list = dataclass_field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.tau)

    @property
    def usable(self):
        return ~self.failed

    @property
    def distances(self):
        return np.linalg.norm(self.rcv - self.src, axis=1)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["src_id", "rcv_id", "src_x", "src_y", "src_z",
                             "rcv_x", "rcv_y", "rcv_z", "tau", "residual",
                             "failed"])
            for i in range(len(self)):
                writer.writerow([int(self.src_idx[i]), int(self.rcv_idx[i]),
                                 *(repr(float(v)) for v in self.src[i]),
                                 *(repr(float(v)) for v in self.rcv[i]),
                                 repr(float(self.tau[i])),
                                 repr(float(self.residual[i])),
                                 int(self.failed[i])])

    @classmethod
    def from_csv(cls, path):
        rows = list(csv.DictReader(open(path, newline="")))
        if not rows:
            raise DatasetError(f"empty travel-time table {path}")
        get = lambda key, typ: np.array([typ(r[key]) for r in rows])
        src = np.stack([get("src_x", float), get("src_y", float),
                        get("src_z", float)], axis=1)
        rcv = np.stack([get("rcv_x", float), get("rcv_y", float),
                        get("rcv_z", float)], axis=1)
        return cls(src_idx=get("src_id", int), rcv_idx=get("rcv_id", int),
                   src=src, rcv=rcv, tau=get("tau", float),
                   residual=get("residual", float),
                   iterations=np.zeros(len(rows), dtype=int),
                   failed=get("failed", int).astype(bool))


# ---------------------------------------------------------------------------
# initial-value tracing
# ---------------------------------------------------------------------------

def trace_ray(field, origin, direction, max_tau, step=None):
    """Trace a single ray until its accumulated travel time reaches max_tau."""
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-12:
        raise ValueError("direction must be a unit vector")
    if max_tau <= 0.0:
        raise ValueError("max_tau must be positive")
    step = default_step(field) if step is None else float(step)

    x = np.asarray(origin, dtype=float)[None, :].copy()
    p = direction[None, :] * field.values(x)[:, None]
    tau = 0.0
    nodes, slows = [x[0].copy()], [p[0].copy()]

    def substep(x, p, tau, h):
        if h < 1e-300:
            raise ConnectionFailure("step-size underflow while tracing")
        xs, ps, ts = integrate_rays(field, x, p / np.linalg.norm(p),
                                    np.array([h]), step=h)
        return xs, ps, tau + ts[0]

    # march whole steps, then solve the final partial step for tau == max_tau
    while True:
        x_next, p_next, tau_next = substep(x, p, tau, step)
        if tau_next >= max_tau or abs(tau_next - max_tau) < 1e-15:
            break
        x, p, tau = x_next, p_next, tau_next
        nodes.append(x[0].copy())
        slows.append(p[0].copy())

    # secant refinement on the partial step length
    h_lo, h_hi = 0.0, step
    t_lo = tau
    h_cur = step * (max_tau - tau) / max(tau_next - tau, 1e-300)
    for _ in range(60):
        x_try, p_try, tau_try = substep(x, p, tau, max(h_cur, 1e-300))
        err = tau_try - max_tau
        if abs(err) < 1e-14 * max(1.0, max_tau):
            break
        if err > 0:
            h_hi = h_cur
        else:
            h_lo, t_lo = h_cur, tau_try
        denom = tau_try - t_lo
        h_cur = 0.5 * (h_lo + h_hi) if denom <= 0 else \
            min(max(h_lo + (h_cur - h_lo) * (max_tau - t_lo) / denom, h_lo), h_hi)
    nodes.append(x_try[0].copy())
    slows.append(p_try[0].copy())
    return GeodesicPath(nodes=np.array(nodes), slowness=np.array(slows),
                        tau=float(tau_try), endpoint_residual=0.0)


# ---------------------------------------------------------------------------
# two-point connection (batched shooting)
# ---------------------------------------------------------------------------

def _complement_basis(d):
    """Orthonormal pair spanning the plane perpendicular to each row of d."""
    m = len(d)
    helper = np.zeros((m, 3))
    helper[np.arange(m), np.argmin(np.abs(d), axis=1)] = 1.0
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1, axis=1)[:, None]
    e2 = np.cross(d, e1)
    return e1, e2


def connect_many(field, X, Y, tol=DEFAULT_TOL, step=None, max_iter=25,
                 record=True):
    """Solve the two-point problem for every (X[i], Y[i]) pair at once.

    Unknowns per pair: two direction offsets in the plane perpendicular to
    the chord, plus the total arc length.  A damped Newton iteration with a
    finite-difference Jacobian runs on all not-yet-converged pairs in one
    batched trace per iteration.

    Returns (paths, info) where info carries per-pair iteration counts,
    residuals and failure flags.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    m = len(X)
    step = default_step(field) if step is None else float(step)

    chord = X - Y
    L0 = np.linalg.norm(chord, axis=1)
    if np.any(L0 < 1e-12):
        raise ValueError("coincident endpoints in connection batch")
    d0 = chord / L0[:, None]
    e1, e2 = _complement_basis(d0)

    u = np.zeros((m, 3))
    u[:, 2] = L0
    residual = np.full(m, np.inf)
    iterations = np.zeros(m, dtype=int)
    active = np.ones(m, dtype=bool)

    def directions(uu, idx):
        d = d0[idx] + uu[:, 0, None] * e1[idx] + uu[:, 1, None] * e2[idx]
        return d / np.linalg.norm(d, axis=1)[:, None]

    def endpoints(uu, idx):
        d = directions(uu, idx)
        xe, _, te = integrate_rays(field, Y[idx], d, np.maximum(uu[:, 2], 1e-12),
                                   step=step)
        return xe, te

    fd = 1e-6
    for it in range(max_iter):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        uu = u[idx]
        # residual and three Jacobian columns in a single batched trace
        trial = np.concatenate([uu,
                                uu + np.array([fd, 0, 0]),
                                uu + np.array([0, fd, 0]),
                                uu + np.array([0, 0, fd])], axis=0)
        rep = np.tile(idx, 4)
        xe, _ = endpoints(trial, rep)
        k = len(idx)
        r0 = xe[:k] - X[idx]
        J = np.stack([(xe[k:2 * k] - xe[:k]) / fd,
                      (xe[2 * k:3 * k] - xe[:k]) / fd,
                      (xe[3 * k:] - xe[:k]) / fd], axis=2)

        rnorm = np.linalg.norm(r0, axis=1)
        residual[idx] = rnorm
        done = rnorm <= tol
        active[idx[done]] = False
        idx = idx[~done]
        if len(idx) == 0:
            break
        iterations[idx] += 1

        try:
            du = np.linalg.solve(J[~done], -r0[~done][..., None])[..., 0]
        except np.linalg.LinAlgError:
            du = np.einsum("nij,nj->ni", np.linalg.pinv(J[~done]), -r0[~done])
        # damp: direction offsets limited to ~0.5 rad, length to half a chord
        du[:, 0] = np.clip(du[:, 0], -0.5, 0.5)
        du[:, 1] = np.clip(du[:, 1], -0.5, 0.5)
        du[:, 2] = np.clip(du[:, 2], -0.5 * L0[idx], 0.5 * L0[idx])
        u[idx] += du
        u[idx, 2] = np.maximum(u[idx, 2], 0.1 * L0[idx])

    failed = active.copy()

    # final trace with node recording for every pair
    d = directions(u, np.arange(m))
    xe, pe, te, hist = integrate_rays(field, Y, d, np.maximum(u[:, 2], 1e-12),
                                      step=step, record=True)
    final_res = np.linalg.norm(xe - X, axis=1)
    failed |= final_res > 10.0 * tol
    nodes, slows, taus = hist
    paths = []
    for i in range(m):
        paths.append(GeodesicPath(
            nodes=nodes[:, i, :].copy(), slowness=slows[:, i, :].copy(),
            tau=float(te[i]), endpoint_residual=float(final_res[i]),
            iterations=int(iterations[i]), converged=not failed[i]))
    info = {"iterations": iterations, "residual": final_res, "failed": failed}
    return paths, info


def connect(field, x, y, tol=DEFAULT_TOL, step=None, max_iter=25, force=False):
    """Two-point geodesic between x and y (single pair).

    The field is expected to satisfy the geodesic-regularity condition; pass
    ``force=True`` to attempt a connection on a field whose sufficient
    regularity check fails (routine for weak Gaussian phantoms, where the
    straight-chord seed still converges).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.linalg.norm(x - y) < 1e-12:
        raise ValueError("x and y must be distinct")
    if not force:
        spacing = max(field.support_radius / 10.0, 1e-3)
        if check_regularity(field, spacing).verdict == "fail":
            raise ConnectionFailure(
                "field fails the sufficient regularity check; pass force=True "
                "to attempt the connection anyway")
    paths, info = connect_many(field, x[None, :], y[None, :], tol=tol,
                               step=step, max_iter=max_iter)
    if info["failed"][0]:
        raise ConnectionFailure(
            f"two-point solver stalled at residual {info['residual'][0]:.3e} "
            f"(tol {tol:.1e})")
    return paths[0]


def build_table(field, surf, tol=DEFAULT_TOL, step=None, force=True):
    """Travel times for all ordered (receiver, source) pairs on the surface.

    Per-pair failures are recorded in the table rather than raised; only an
    all-pairs failure is fatal.
    """
    surf.validate_against(field)
    pairs = surf.ordered_pairs()
    if not pairs:
        raise DatasetError("surface configuration yields no usable pairs")
    if not force:
        spacing = max(field.support_radius / 10.0, 1e-3)
        if check_regularity(field, spacing).verdict == "fail":
            raise ConnectionFailure("field fails regularity; use force=True")

    rcv_idx = np.array([j for j, _ in pairs])
    src_idx = np.array([i for _, i in pairs])
    X = surf.receivers[rcv_idx]
    Y = surf.sources[src_idx]
    paths, info = connect_many(field, X, Y, tol=tol, step=step)
    if info["failed"].all():
        raise DatasetError("every pair failed to connect")
    taus = np.array([p.tau for p in paths])
    return TravelTimeTable(src_idx=src_idx, rcv_idx=rcv_idx, src=Y.copy(),
                           rcv=X.copy(), tau=taus, residual=info["residual"],
                           iterations=info["iterations"],
                           failed=info["failed"], paths=paths)


# ---------------------------------------------------------------------------
# lattice shortest-path oracle
# ---------------------------------------------------------------------------

_GL4_NODES, _GL4_WEIGHTS = np.polynomial.legendre.leggauss(4)


def _edge_weights(field, starts, ends, panel_cap):
    """Line integral of n along each straight edge (composite Gauss panels).

    Panels are capped at a field-scale length, so the quadrature error is
    far below the monotone-refinement slack and halving an edge reproduces
    the same panel boundaries: edge weights stay additive under lattice
    refinement to machine precision.  All edges in a call share one length.
    """
    length = float(np.linalg.norm(ends[0] - starts[0]))
    panels = max(1, int(np.ceil(length / panel_cap)))
    total = np.zeros(len(starts))
    span = (ends - starts) / panels
    for j in range(panels):
        base = starts + j * span
        for node, w in zip(_GL4_NODES, _GL4_WEIGHTS):
            t = 0.5 * (node + 1.0)
            total += w * field.values(base + t * span)
    return total * (0.5 * length / panels)


_OFFSETS_26 = np.array([(dx, dy, dz)
                        for dx in (-1, 0, 1)
                        for dy in (-1, 0, 1)
                        for dz in (-1, 0, 1)
                        if (dx, dy, dz) > (0, 0, 0)])


def travel_time_oracle(field, x, y, grid_spacing, box=None, padding=0.25):
    """Shortest-path travel time on a 26-neighbor lattice graph.

    Independent verification route for the ray-traced travel time: it
    upper-bounds the true tau up to lattice metrication error (small for
    near-axis-aligned chords).  Both endpoints must land on lattice nodes;
    the lattice is anchored at ``y`` so halved spacings nest.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h = float(grid_spacing)

    if box is None:
        lo = np.minimum(np.minimum(x, y),
                        field.support_center - field.support_radius) - padding
        hi = np.maximum(np.maximum(x, y),
                        field.support_center + field.support_radius) + padding
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in box)

    # anchor the node set at y: nodes are y + h * Z^3, clipped to the box
    kmin = np.ceil((lo - y) / h - 1e-9).astype(int)
    kmax = np.floor((hi - y) / h + 1e-9).astype(int)
    dims = kmax - kmin + 1
    if np.any(dims < 2):
        raise ValueError("oracle box too small for the requested spacing")

    def node_index(pt):
        k = (pt - y) / h
        ki = np.rint(k).astype(int)
        if np.any(np.abs(k - ki) > 1e-6):
            raise ValueError("endpoint does not lie on the oracle lattice")
        if np.any(ki < kmin) or np.any(ki > kmax):
            raise ValueError("endpoint outside the oracle box")
        rel = ki - kmin
        return int(np.ravel_multi_index(rel, dims))

    src_node = node_index(y)
    dst_node = node_index(x)

    origin = y + kmin * h
    nx, ny, nz = int(dims[0]), int(dims[1]), int(dims[2])
    base = np.arange(nx * ny * nz).reshape(nx, ny, nz)
    rows, cols, data = [], [], []
    for off in _OFFSETS_26:
        ox, oy, oz = (int(v) for v in off)
        sl_from = tuple(slice(max(0, -o), min(d, d - o))
                        for o, d in zip((ox, oy, oz), (nx, ny, nz)))
        src_ids = base[sl_from].ravel()
        dst_ids = (src_ids + ((ox * ny + oy) * nz + oz))
        ii = np.stack(np.unravel_index(src_ids, (nx, ny, nz)), axis=1)
        starts = origin + ii * h
        ends = starts + off * h
        w = _edge_weights(field, starts, ends,
                          panel_cap=field.support_radius / 50.0)
        rows.append(src_ids)
        cols.append(dst_ids)
        data.append(w)
    graph = sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nx * ny * nz, nx * ny * nz))
    dist = csgraph.dijkstra(graph, directed=False, indices=src_node)
    val = float(dist[dst_node])
    if not np.isfinite(val):
        raise RuntimeError("oracle graph disconnected (should not happen)")
    return val
