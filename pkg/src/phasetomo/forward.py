"""Synthetic phaseless spectra f(x,y,k) = |u_sc|^2 on a k-grid.

The scattered field is modeled through its high-frequency form

    u_sc(k) = A e^{i k tau} - A0 e^{i k d} + u_hat(k),

with A the leading amplitude along the connecting geodesic, A0 the incident
spherical-wave amplitude 1/(4 pi d), and u_hat an O(1/k) remainder whose
k-derivative is also O(1/k).  f is always evaluated in complex arithmetic so
the residual term genuinely contains the cross products, not just an
additive perturbation of the two-term beat formula.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from . import geodesics
from .errors import AmplitudeFailure, DatasetError

FOUR_PI = 4.0 * np.pi


def incident_amplitude(dist):
    """Spherical-wave amplitude 1/(4 pi |x-y|)."""
    dist = float(dist)
    if dist <= 0.0:
        raise ValueError("source and receiver must be distinct")
    return 1.0 / (FOUR_PI * dist)


@dataclass(frozen=True)
class LeadingAmplitude:
    value: float
    model: str                  # "spreading" | "prescribed"

    def __post_init__(self):
        if self.value <= 0.0:
            raise AmplitudeFailure("leading amplitude must be positive")

    def __float__(self):
        return self.value


def leading_amplitude(field, path, model="spreading", prescribed=None,
                      paraxial_delta=1e-5, step=None):
    """Leading amplitude A(x,y) for a converged two-point geodesic.

    ``spreading`` evaluates the paraxial ray-tube Jacobian: the central ray
    plus two rays with the launch direction tilted by ``paraxial_delta`` are
    traced in one batch, and A = 1/(4 pi sqrt(J)) with J the spread area per
    unit solid angle.  In vacuum this reduces to 1/(4 pi |x-y|) exactly (up
    to O(delta^2)).  ``prescribed`` passes a caller-supplied positive value
    through untouched, which decouples recovery tests from transport
    accuracy.
    """
    if model == "prescribed":
        if prescribed is None:
            raise ValueError("prescribed amplitude model needs a value")
        return LeadingAmplitude(float(prescribed), "prescribed")
    if model != "spreading":
        raise ValueError(f"unknown amplitude model {model!r}")
    if not path.converged:
        raise AmplitudeFailure("cannot evaluate spreading on a failed path")

    y = path.nodes[0]
    d0 = path.slowness[0] / np.linalg.norm(path.slowness[0])
    length = path.euclidean_length
    e1, e2 = geodesics._complement_basis(d0[None, :])
    e1, e2 = e1[0], e2[0]
    delta = float(paraxial_delta)
    dirs = np.stack([d0,
                     np.cos(delta) * d0 + np.sin(delta) * e1,
                     np.cos(delta) * d0 + np.sin(delta) * e2])
    origins = np.tile(y, (3, 1))
    step = geodesics.default_step(field) if step is None else float(step)
    xe, pe, _ = geodesics.integrate_rays(field, origins, dirs,
                                         np.full(3, length), step=step)
    that = pe[0] / np.linalg.norm(pe[0])
    v1 = xe[1] - xe[0]
    v2 = xe[2] - xe[0]
    v1 -= np.dot(v1, that) * that
    v2 -= np.dot(v2, that) * that
    area = np.linalg.norm(np.cross(v1, v2)) / delta ** 2
    if not np.isfinite(area) or area < (1e-6 * length) ** 2:
        raise AmplitudeFailure("degenerate ray-tube Jacobian (caustic)")
    return LeadingAmplitude(1.0 / (FOUR_PI * np.sqrt(area)), "spreading")


# ---------------------------------------------------------------------------
# k-grid and remainder models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KGrid:
    """Uniform wavenumber grid on [k_min, k_max]."""

    k_min: float = 50.0
    k_max: float = 500.0
    dk: float = 0.1

    def __post_init__(self):
        if self.k_min <= 0.0:
            raise ValueError("k_min must be positive")
        if self.k_max <= self.k_min:
            raise ValueError("k_max must exceed k_min")
        if self.dk <= 0.0:
            raise ValueError("dk must be positive")

    @property
    def values(self):
        count = int(np.floor((self.k_max - self.k_min) / self.dk + 1e-9)) + 1
        return self.k_min + self.dk * np.arange(count)

    @property
    def span(self):
        return self.k_max - self.k_min

    @classmethod
    def for_alpha(cls, alpha_max, k_min=50.0, k_max=500.0,
                  samples_per_period=20):
        """dk so that the fastest beat still gets samples_per_period points."""
        dk = 2.0 * np.pi / (samples_per_period * alpha_max)
        dk = min(dk, (k_max - k_min) / 32.0)
        return cls(k_min, k_max, dk)


@dataclass(frozen=True)
class RemainderModel:
    """O(1/k) remainder with an O(1/k) derivative.

    * ``none``           u_hat = 0
    * ``rational-decay`` u_hat = c e^{i k tau} / k
    * ``random-smooth``  u_hat = s(k) / k with s a band-limited random
      trigonometric profile (frequencies <= omega_max), so both decay bounds
      hold with a constant proportional to c.

    The random profile's mode frequencies are drawn one per slot of width
    omega_max / n_slots with at least half a slot between neighbors, where
    the slot count keeps every pairwise beat of |s|^2 above two full periods
    across the sampled window.  Without that spacing a slow envelope beat
    can make the remainder saturate its O(1/k) bound only near k_max, which
    no finite-band test can tell apart from a persistent signal.

    With ``normalize`` the profile is rescaled so the reported constant
    C = max(k |u_hat|, k |du_hat/dk|) equals c exactly on the sampled grid.
    """

    kind: str = "none"
    c: complex = 0.1
    seed: int = 0
    n_modes: int = 6
    omega_max: float = 0.25
    normalize: bool = False

    def __post_init__(self):
        if self.kind not in ("none", "rational-decay", "random-smooth"):
            raise ValueError(f"unknown remainder kind {self.kind!r}")

    def sample(self, k, tau, pair_seed=0):
        """(u_hat values on the grid, reported constant C)."""
        k = np.asarray(k, dtype=float)
        if self.kind == "none":
            return np.zeros_like(k, dtype=complex), 0.0
        if self.kind == "rational-decay":
            u = self.c * np.exp(1j * k * tau) / k
        else:
            rng = np.random.default_rng(
                np.random.SeedSequence([int(self.seed), int(pair_seed)]))
            span = k[-1] - k[0]
            beat_quantum = 4.0 * np.pi / span   # two periods over the window
            slots = int(np.floor(self.omega_max / (2.0 * beat_quantum)))
            slots = max(1, min(self.n_modes, slots))
            width = self.omega_max / slots
            amps = rng.normal(size=slots) + 1j * rng.normal(size=slots)
            offsets = rng.uniform(0.25, 0.75, size=slots)
            omegas = width * (np.arange(slots) + offsets)
            phases = rng.uniform(0.0, 2.0 * np.pi, size=slots)
            s = np.zeros_like(k, dtype=complex)
            for a, w, ph in zip(amps, omegas, phases):
                s += a * np.exp(1j * (w * k + ph))
            s *= abs(self.c) / max(np.abs(s).max(), 1e-300)
            u = s / k
        c_rep = reported_constant(k, u)
        if self.normalize and c_rep > 0.0:
            u *= abs(self.c) / c_rep
            c_rep = reported_constant(k, u)
        return u, c_rep

    def descriptor(self):
        return {"kind": self.kind, "c_re": float(np.real(self.c)),
                "c_im": float(np.imag(self.c)), "seed": int(self.seed),
                "n_modes": int(self.n_modes),
                "omega_max": float(self.omega_max),
                "normalize": bool(self.normalize)}

    @classmethod
    def from_descriptor(cls, doc):
        return cls(kind=doc["kind"], c=doc["c_re"] + 1j * doc["c_im"],
                   seed=doc["seed"], n_modes=doc["n_modes"],
                   omega_max=doc["omega_max"],
                   normalize=doc.get("normalize", False))


def reported_constant(k, u_hat):
    """Smallest C with |u_hat| <= C/k and |du_hat/dk| <= C/k on the grid."""
    k = np.asarray(k, dtype=float)
    u_hat = np.asarray(u_hat)
    if len(k) < 2:
        return float(np.max(k * np.abs(u_hat), initial=0.0))
    c_val = np.max(k * np.abs(u_hat))
    dk = np.diff(k)
    deriv = np.abs(np.diff(u_hat)) / dk
    kmid = 0.5 * (k[:-1] + k[1:])
    c_der = np.max(kmid * deriv)
    return float(max(c_val, c_der))


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------

@dataclass
class PhaselessSpectrum:
    """Samples of |u_sc|^2 over a k-grid for one source-receiver pair."""

    k: np.ndarray
    f: np.ndarray
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    provenance: dict = dataclass_field(default_factory=dict)

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        if self.k.ndim != 1 or self.k.shape != self.f.shape:
            raise ValueError("k and f must be matching 1-D arrays")
        if self.k[0] <= 0.0:
            raise ValueError("k_min must be positive")
        dk = np.diff(self.k)
        if np.any(dk <= 0.0) or np.ptp(dk) > 1e-9 * dk[0]:
            raise ValueError("k-grid must be uniform and strictly increasing")
        if np.any(self.f < 0.0):
            raise ValueError("f is a squared modulus and cannot be negative")

    @property
    def dist(self):
        if self.x is None or self.y is None:
            return self.provenance.get("dist")
        return float(np.linalg.norm(self.x - self.y))


def synthesize_spectrum(A, A0, tau, dist, rem, kgrid, pair_seed=0,
                        x=None, y=None):
    """One pair's phaseless spectrum, with generation provenance attached."""
    A = float(A)
    A0 = float(A0)
    tau = float(tau)
    dist = float(dist)
    if tau < dist - 1e-9 * max(1.0, dist):
        raise ValueError("tau < |x-y| violates the admissible-medium bound")
    k = kgrid.values
    u_hat, c_rep = rem.sample(k, tau, pair_seed=pair_seed)
    u_sc = A * np.exp(1j * k * tau) - A0 * np.exp(1j * k * dist) + u_hat
    f = np.abs(u_sc) ** 2
    prov = {"A": A, "A0": A0, "tau": tau, "dist": dist, "alpha": tau - dist,
            "remainder_C": c_rep, "pair_seed": int(pair_seed)}
    return PhaselessSpectrum(k=k, f=f, x=None if x is None else np.asarray(x, float),
                             y=None if y is None else np.asarray(y, float),
                             provenance=prov)


@dataclass
class Dataset:
    """All spectra for a surface configuration plus the travel-time table."""

    spectra: list
    table: "geodesics.TravelTimeTable"
    kgrid: KGrid
    remainder: RemainderModel
    seed: int
    amplitude_model: str
    skipped_pairs: list = dataclass_field(default_factory=list)


def synthesize_dataset(field, surf, rem, kgrid, seed=0,
                       amplitude_model="spreading", tol=1e-8, step=None):
    """Spectra for every ordered surface pair (connection failures skipped).

    Per-pair remainder seeds are derived from the master seed and the pair
    index, so regeneration at a fixed seed is bit-identical and pairs remain
    independent under any parallel execution order.
    """
    table = geodesics.build_table(field, surf, tol=tol, step=step, force=True)
    spectra = []
    skipped = []
    for i in range(len(table)):
        if table.failed[i]:
            skipped.append({"pair": i, "reason": "connection failure"})
            continue
        x, ysrc = table.rcv[i], table.src[i]
        dist = float(np.linalg.norm(x - ysrc))
        A0 = incident_amplitude(dist)
        if amplitude_model == "spreading":
            try:
                A = leading_amplitude(field, table.paths[i], step=step).value
            except AmplitudeFailure as exc:
                skipped.append({"pair": i, "reason": str(exc)})
                continue
        else:
            A = A0
        tau = max(float(table.tau[i]), dist)   # clip solver noise at the bound
        spec = synthesize_spectrum(A, A0, tau, dist, rem, kgrid,
                                   pair_seed=seed ^ (i + 1), x=x, y=ysrc)
        spec.provenance.update({"pair": i, "src_id": int(table.src_idx[i]),
                                "rcv_id": int(table.rcv_idx[i])})
        spectra.append(spec)
    if not spectra:
        raise DatasetError("no pair produced a spectrum")
    return Dataset(spectra=spectra, table=table, kgrid=kgrid, remainder=rem,
                   seed=seed, amplitude_model=amplitude_model,
                   skipped_pairs=skipped)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def write_dataset(dataset, out_dir):
    """Manifest JSON plus one (k, f) CSV per pair."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spectra_dir = out / "spectra"
    spectra_dir.mkdir(exist_ok=True)
    pairs = []
    for spec in dataset.spectra:
        pair = spec.provenance["pair"]
        name = f"pair_{pair:04d}.csv"
        with open(spectra_dir / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "f"])
            for kv, fv in zip(spec.k, spec.f):
                writer.writerow([repr(float(kv)), repr(float(fv))])
        entry = {"pair": pair, "file": f"spectra/{name}",
                 "x": spec.x.tolist(), "y": spec.y.tolist()}
        entry.update({key: val for key, val in spec.provenance.items()})
        pairs.append(entry)
    manifest = {
        "kgrid": {"k_min": dataset.kgrid.k_min, "k_max": dataset.kgrid.k_max,
                  "dk": dataset.kgrid.dk},
        "remainder": dataset.remainder.descriptor(),
        "seed": int(dataset.seed),
        "amplitude_model": dataset.amplitude_model,
        "skipped_pairs": dataset.skipped_pairs,
        "pairs": pairs,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    dataset.table.to_csv(out / "travel_times.csv")


def read_dataset(out_dir):
    """Rehydrate spectra (and provenance) from a dataset directory."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    kg = KGrid(**manifest["kgrid"])
    rem = RemainderModel.from_descriptor(manifest["remainder"])
    spectra = []
    for entry in manifest["pairs"]:
        rows = list(csv.DictReader(open(out / entry["file"], newline="")))
        k = np.array([float(r["k"]) for r in rows])
        f = np.array([float(r["f"]) for r in rows])
        prov = {key: val for key, val in entry.items()
                if key not in ("file", "x", "y")}
        spectra.append(PhaselessSpectrum(k=k, f=f, x=np.array(entry["x"]),
                                         y=np.array(entry["y"]),
                                         provenance=prov))
    table = None
    if (out / "travel_times.csv").exists():
        table = geodesics.TravelTimeTable.from_csv(out / "travel_times.csv")
    return Dataset(spectra=spectra, table=table, kgrid=kg, remainder=rem,
                   seed=manifest["seed"],
                   amplitude_model=manifest["amplitude_model"],
                   skipped_pairs=manifest.get("skipped_pairs", []))
