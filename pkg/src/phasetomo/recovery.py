"""Travel-time recovery from a single phaseless spectrum.

The chain mirrors the constructive uniqueness argument: decide whether the
spectrum's tail oscillation persists (if not, tau equals the chord length),
estimate the leading amplitude from the tail sup of f, normalize to the
oscillation function g, locate the zeros of g, and convert the asymptotic
zero spacing pi/alpha into the phase lag alpha = tau - |x-y|.

Every estimator works on a finite k-window, so each limit from the theory is
realized as an extrapolation with a reported residual: the tail sup is
extrapolated against 1/k', and the zero spacing is a weighted regression of
zero positions against their index with optional alternating-sign terms that
absorb the O(1/k) crossing-level corrections.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.interpolate import make_interp_spline
from scipy.optimize import brentq

from .errors import (InconsistentDataError, InsufficientBandError,
                     UnreliableEstimateError)
from .forward import incident_amplitude


# ---------------------------------------------------------------------------
# result types
# ---------------------------------------------------------------------------

@dataclass
class AmplitudeEstimate:
    f_star: float
    A_hat: float
    tail_start: float            # smallest k' used for the sup windows
    fit_residual: float          # rms deviation of sup values from the 1/k' fit
    inconsistent: bool = False   # sqrt(f*) < A0 beyond tolerance (clamped)


@dataclass
class OscillationFunction:
    k: np.ndarray
    g: np.ndarray
    A_hat: float
    A0: float

    @property
    def p_bound(self):
        """How far |g| exceeds 1, an implied bound on the remainder term."""
        return max(0.0, float(np.max(np.abs(self.g)) - 1.0))


@dataclass
class ZeroSet:
    zeros: np.ndarray            # strictly increasing crossing locations
    brackets: np.ndarray         # (count, 2) sample interval per zero

    @property
    def count(self):
        return len(self.zeros)

    @property
    def spacings(self):
        return np.diff(self.zeros)


@dataclass
class AlphaFit:
    alpha_hat: float
    fit_residual: float          # weighted rms residual / fitted spacing
    naive_last_spacing: float    # pi / (k_N - k_{N-1}), diagnostic only
    used_fallback: bool = False
    used_alternating: bool = False

    def __float__(self):
        return self.alpha_hat


@dataclass
class TravelTimeEstimate:
    alpha_hat: float
    tau_hat: float
    dist: float
    zero_alpha: bool
    diagnostics: dict = dataclass_field(default_factory=dict)


@dataclass
class RecoveryParams:
    """Knobs for the per-pair recovery chain."""

    alpha_min: float | None = None       # resolvable floor; default 4*pi/span
    tail_fractions: tuple | None = None  # sup-window start fractions
    tol_osc: float | None = None         # zero-alpha tail-oscillation gate
    amplitude_first: bool = False        # ablation: estimate A before the gate
    exact_amplitude: bool = False        # ablation: take A from provenance
    fallback_residual: float = 0.15
    reject_residual: float = 0.5


def resolvable_alpha_floor(kgrid_span):
    """Smallest alpha a window can classify: two full beat periods."""
    return 4.0 * np.pi / kgrid_span


# ---------------------------------------------------------------------------
# amplitude extraction (tail sup of f)
# ---------------------------------------------------------------------------

def _refined_window_max(k, f, lo):
    """Max of f over k >= lo with parabolic refinement of interior peaks."""
    mask = k >= lo
    kv, fv = k[mask], f[mask]
    best = float(fv.max())
    interior = np.flatnonzero((fv[1:-1] >= fv[:-2]) & (fv[1:-1] >= fv[2:]))
    for i in interior + 1:
        y0, y1, y2 = fv[i - 1], fv[i], fv[i + 1]
        denom = y0 - 2.0 * y1 + y2
        if denom < 0.0:                      # genuine local max
            peak = y1 - 0.125 * (y2 - y0) ** 2 / denom
            best = max(best, float(peak))
    return best


def estimate_amplitude(spec, A0=None, tail_fractions=None, alpha_min=None):
    """Leading amplitude from the tail sup-limit of f.

    The sup over (k', k_max] is evaluated for several tail starts k' and
    extrapolated linearly against 1/k', which removes the first-order
    remainder bias; the intercept estimates f* = (A + A0)^2.  A negative
    sqrt(f*) - A0 is clamped to zero and flagged inconsistent (this is what
    an alpha = 0 spectrum with A = A0 produces).
    """
    k, f = spec.k, spec.f
    if A0 is None:
        A0 = incident_amplitude(spec.dist)
    span = k[-1] - k[0]
    if tail_fractions is None:
        if alpha_min is None:
            alpha_min = resolvable_alpha_floor(span)
        period = 2.0 * np.pi / alpha_min
        frac_max = min(0.75, 1.0 - period / span)
        if frac_max < 0.2:
            raise InsufficientBandError(
                "window too short to hold one beat period in the tail")
        tail_fractions = tuple(frac_max * np.linspace(0.4, 1.0, 5))

    starts = k[0] + span * np.asarray(tail_fractions, dtype=float)
    sups = np.array([_refined_window_max(k, f, lo) for lo in starts])
    design = np.stack([np.ones_like(starts), 1.0 / starts], axis=1)
    coef, *_ = np.linalg.lstsq(design, sups, rcond=None)
    f_star = float(coef[0])
    residual = float(np.sqrt(np.mean((design @ coef - sups) ** 2)))

    f_star = max(f_star, 0.0)
    root = np.sqrt(f_star)
    inconsistent = root - A0 < -1e-6 * max(A0, 1.0)
    A_hat = max(root - A0, 0.0)
    return AmplitudeEstimate(f_star=f_star, A_hat=A_hat,
                             tail_start=float(starts[0]),
                             fit_residual=residual,
                             inconsistent=bool(inconsistent))


# ---------------------------------------------------------------------------
# alpha = 0 dichotomy
# ---------------------------------------------------------------------------

def _detrended(spec):
    """Residual of f after removing a smooth a + b/k + c/k^2 trend."""
    k, f = spec.k, spec.f
    design = np.stack([np.ones_like(k), 1.0 / k, 1.0 / k ** 2], axis=1)
    coef, *_ = np.linalg.lstsq(design, f, rcond=None)
    return f - design @ coef, coef


def tail_oscillation(spec):
    """(max - min of detrended f over the last third, fitted-trend gate).

    The literal finite-band surrogate of the limit test: the gate is three
    times the fitted decaying-trend magnitude at k_max plus a machine floor.
    Used when the caller supplies an explicit tolerance; the default
    classifier in :func:`detect_zero_alpha` is the persistence ratio below,
    which is scale-free.
    """
    k, f = spec.k, spec.f
    resid, coef = _detrended(spec)
    last = k >= k[-1] - (k[-1] - k[0]) / 3.0
    osc = float(resid[last].max() - resid[last].min())
    trend_at_kmax = abs(coef[1]) / k[-1] + abs(coef[2]) / k[-1] ** 2
    gate = 3.0 * trend_at_kmax + 1e-13 * (1.0 + float(f.max()))
    return osc, gate


def _projection_amplitude(k, resid, omega):
    """Amplitude of the omega-oscillation in resid by least squares."""
    design = np.stack([np.cos(omega * k), np.sin(omega * k),
                       np.ones_like(k), 1.0 / k], axis=1)
    coef, *_ = np.linalg.lstsq(design, resid, rcond=None)
    return float(np.hypot(coef[0], coef[1]))


def oscillation_persistence(spec):
    """(front-half amplitude, back-half amplitude) of the dominant beat.

    The detrended spectrum's dominant frequency is located on the full
    window; the amplitude of that component is then measured independently
    on the two half-windows.  A genuine cos(k alpha) term keeps a constant
    amplitude, so back ~ front; any O(1/k) remainder effect decays at least
    like the mean of 1/k over the halves, pushing back / front well below 1.
    """
    k = spec.k
    resid, _ = _detrended(spec)
    scale = float(np.abs(resid).max())
    if scale < 1e-13 * (1.0 + float(spec.f.max())):
        return 0.0, 0.0
    amps = np.abs(np.fft.rfft(resid))
    if len(amps) < 4:
        return 0.0, 0.0
    dk = k[1] - k[0]
    # skip the DC and first bin: smooth trend leakage lives there, and the
    # slowest classifiable beat has two full periods (bin 2)
    peak = 2 + int(np.argmax(amps[2:]))
    omega = 2.0 * np.pi * peak / (len(k) * dk)
    mid = 0.5 * (k[0] + k[-1])
    front = k <= mid
    back = ~front
    amp_front = _projection_amplitude(k[front], resid[front], omega)
    amp_back = _projection_amplitude(k[back], resid[back], omega)
    return amp_front, amp_back


def detect_zero_alpha(spec, tol_osc=None):
    """True iff the spectrum's oscillation dies out in the tail (tau = |x-y|).

    Default rule: the dominant-frequency amplitude measured on the back half
    of the window must stay comparable to the front half (a persistent beat)
    and be a visible fraction of the spectrum's overall variation; otherwise
    the oscillation is a decaying remainder and alpha = 0.  When ``tol_osc``
    is given it gates the raw last-third oscillation amplitude of the
    detrended spectrum instead.

    Either way the decision reads f directly (never g), so it does not
    depend on any amplitude estimate and may run before or after amplitude
    extraction.
    """
    if tol_osc is not None:
        osc, _ = tail_oscillation(spec)
        return osc < float(tol_osc)
    amp_front, amp_back = oscillation_persistence(spec)
    if amp_front == 0.0 and amp_back == 0.0:
        return True
    f_range = float(spec.f.max() - spec.f.min())
    gate = max(0.45 * amp_front, 0.03 * f_range,
               1e-13 * (1.0 + float(spec.f.max())))
    return amp_back < gate


# ---------------------------------------------------------------------------
# zeros of the oscillation function
# ---------------------------------------------------------------------------

def build_oscillation(spec, A_hat, A0=None):
    if A0 is None:
        A0 = incident_amplitude(spec.dist)
    A_hat = float(A_hat)
    if A_hat <= 0.0:
        raise InconsistentDataError("oscillation needs a positive amplitude")
    g = (A_hat ** 2 + A0 ** 2 - spec.f) / (2.0 * A_hat * A0)
    return OscillationFunction(k=spec.k.copy(), g=g, A_hat=A_hat, A0=float(A0))


def find_zeros(g):
    """All simple crossings of g, refined on a spline interpolant.

    Sign changes between samples are bracketed and refined by root solving
    on a quintic (cubic when short) spline; crossings closer than half the
    median spacing are treated as noise and dropped, mirroring the
    one-zero-per-period monotonicity argument.
    """
    k, gv = g.k, g.g
    if len(k) < 8:
        raise InsufficientBandError("too few samples to locate zeros")
    order = 5 if len(k) > 16 else 3
    spline = make_interp_spline(k, gv, k=order)

    sign = np.sign(gv)
    # nudge exact-zero samples onto the side of their left neighbor
    exact = np.flatnonzero(sign == 0)
    for i in exact:
        sign[i] = sign[i - 1] if i > 0 else 1.0
    flips = np.flatnonzero(sign[:-1] * sign[1:] < 0)

    zeros, brackets = [], []
    for i in flips:
        try:
            root = brentq(spline, k[i], k[i + 1], xtol=1e-14, rtol=8.9e-16)
        except ValueError:
            continue                        # spline moved the crossing outside
        zeros.append(root)
        brackets.append((k[i], k[i + 1]))
    if len(zeros) < 4:
        raise InsufficientBandError(
            f"only {len(zeros)} zero(s) in the window; need >= 4")

    zeros = np.array(zeros)
    brackets = np.array(brackets)
    med = np.median(np.diff(zeros))
    keep = [0]
    for i in range(1, len(zeros)):
        if zeros[i] - zeros[keep[-1]] >= 0.5 * med:
            keep.append(i)
    zeros, brackets = zeros[keep], brackets[keep]
    if len(zeros) < 4:
        raise InsufficientBandError("fewer than 4 separated zeros")
    return ZeroSet(zeros=zeros, brackets=brackets)


# ---------------------------------------------------------------------------
# alpha from the zero spacing
# ---------------------------------------------------------------------------

def _weighted_fit(design, target, weights):
    sw = np.sqrt(weights)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], target * sw, rcond=None)
    resid = target - design @ coef
    rms = float(np.sqrt(np.average(resid ** 2, weights=weights)))
    return coef, rms


def estimate_alpha(zeros, fallback_residual=0.15, reject_residual=0.5):
    """alpha from the asymptotic spacing law: slope of k_n against n is pi/alpha.

    Weighted least squares with weights proportional to the index favors the
    large-n zeros where the O(1/n) spacing correction is smallest.  When the
    window holds enough zeros, alternating-sign regressors (constant and
    1/k_n) absorb the crossing-level shifts, which alternate by construction.
    Falls back to the median of the last ten spacings if the line fit is
    poor, and rejects the estimate entirely above ``reject_residual``.
    """
    kz = np.asarray(zeros.zeros if isinstance(zeros, ZeroSet) else zeros,
                    dtype=float)
    m = len(kz)
    if m < 4:
        raise InsufficientBandError("need at least 4 zeros to fit a spacing")
    n = np.arange(1.0, m + 1.0)
    w = n.copy()

    base = np.stack([np.ones(m), n], axis=1)
    coef, rms = _weighted_fit(base, kz, w)
    slope = coef[1]
    used_alt = False
    if m >= 10:
        alt = np.where(np.arange(m) % 2 == 0, 1.0, -1.0)
        aug = np.concatenate([base, alt[:, None], (alt / kz)[:, None]], axis=1)
        coef_a, rms_a = _weighted_fit(aug, kz, w)
        if rms_a < 0.7 * rms and coef_a[1] > 0.0:
            slope, rms, used_alt = coef_a[1], rms_a, True

    spacings = np.diff(kz)
    naive = float(np.pi / spacings[-1])
    if slope <= 0.0:
        raise UnreliableEstimateError("zero positions are not increasing in n")

    rel_resid = rms / slope
    used_fallback = False
    if rel_resid > fallback_residual:
        tail = spacings[-10:]
        med = float(np.median(tail))
        spread = float(np.percentile(tail, 75) - np.percentile(tail, 25))
        if rel_resid > reject_residual and spread > 0.25 * med:
            raise UnreliableEstimateError(
                f"spacing fit residual {rel_resid:.3f} with unstable spacings")
        slope = med
        used_fallback = True

    return AlphaFit(alpha_hat=float(np.pi / slope), fit_residual=float(rel_resid),
                    naive_last_spacing=naive, used_fallback=used_fallback,
                    used_alternating=used_alt)


# ---------------------------------------------------------------------------
# per-pair orchestration
# ---------------------------------------------------------------------------

def recover_tau(spec, A0=None, dist=None, params=None):
    """Full chain: dichotomy gate, amplitude, zeros, spacing, tau.

    The alpha = 0 test runs before amplitude extraction by default: with a
    vanished beat the tail sup estimates (A - A0)^2 instead of (A + A0)^2,
    so an amplitude extracted first would be meaningless, while the gate
    itself depends only on f's tail.  ``params.amplitude_first`` flips the
    order for ablation; the classification outcome is the same either way.
    """
    params = params or RecoveryParams()
    if dist is None:
        dist = spec.dist
    if dist is None or dist <= 0.0:
        raise ValueError("pair distance |x-y| must be known and positive")
    dist = float(dist)
    if A0 is None:
        A0 = incident_amplitude(dist)

    diagnostics = {}
    amp = None
    if params.amplitude_first and not params.exact_amplitude:
        amp = estimate_amplitude(spec, A0, params.tail_fractions,
                                 params.alpha_min)
        diagnostics["amplitude_first"] = True

    amp_front, amp_back = oscillation_persistence(spec)
    diagnostics["beat_amplitude_front"] = amp_front
    diagnostics["beat_amplitude_back"] = amp_back
    if detect_zero_alpha(spec, tol_osc=params.tol_osc):
        diagnostics["zero_count"] = 0
        diagnostics["fit_residual"] = 0.0
        return TravelTimeEstimate(alpha_hat=0.0, tau_hat=dist, dist=dist,
                                  zero_alpha=True, diagnostics=diagnostics)

    if params.exact_amplitude:
        if "A" not in spec.provenance:
            raise ValueError("exact-amplitude mode needs provenance")
        A_hat = float(spec.provenance["A"])
        diagnostics["A_hat"] = A_hat
    else:
        if amp is None:
            amp = estimate_amplitude(spec, A0, params.tail_fractions,
                                     params.alpha_min)
        if amp.inconsistent:
            raise InconsistentDataError(
                "negative amplitude estimate on an oscillating spectrum")
        A_hat = amp.A_hat
        diagnostics["A_hat"] = A_hat
        diagnostics["amplitude_fit_residual"] = amp.fit_residual

    g = build_oscillation(spec, A_hat, A0)
    diagnostics["p_bound"] = g.p_bound
    zeros = find_zeros(g)
    fit = estimate_alpha(zeros, params.fallback_residual,
                         params.reject_residual)
    diagnostics["zero_count"] = zeros.count
    diagnostics["fit_residual"] = fit.fit_residual
    diagnostics["naive_last_spacing_alpha"] = fit.naive_last_spacing
    diagnostics["used_fallback"] = fit.used_fallback
    diagnostics["used_alternating"] = fit.used_alternating

    alpha = fit.alpha_hat
    if alpha <= 0.0:
        raise UnreliableEstimateError("non-positive alpha from spacing fit")
    return TravelTimeEstimate(alpha_hat=alpha, tau_hat=alpha + dist,
                              dist=dist, zero_alpha=False,
                              diagnostics=diagnostics)


def recover_batch(spectra, params=None):
    """Recover every spectrum; per-pair failures become error records.

    Returns a list of dicts (one per spectrum, in input order) suitable for
    the CSV report: pair id, branch, estimates, diagnostics or error code.
    """
    rows = []
    for spec in spectra:
        pair = spec.provenance.get("pair", len(rows))
        try:
            est = recover_tau(spec, params=params)
            rows.append({
                "pair": pair, "ok": True, "zero_alpha": est.zero_alpha,
                "A_hat": est.diagnostics.get("A_hat", 0.0),
                "alpha_hat": est.alpha_hat, "tau_hat": est.tau_hat,
                "dist": est.dist,
                "zero_count": est.diagnostics.get("zero_count", 0),
                "fit_residual": est.diagnostics.get("fit_residual", 0.0),
                "error": "",
            })
        except Exception as exc:   # per-pair isolation is the contract
            rows.append({
                "pair": pair, "ok": False, "zero_alpha": False,
                "A_hat": float("nan"), "alpha_hat": float("nan"),
                "tau_hat": float("nan"),
                "dist": spec.dist if spec.dist else float("nan"),
                "zero_count": 0, "fit_residual": float("nan"),
                "error": f"{type(exc).__name__}: {exc}",
            })
    return rows
