"""Batch front-end: generate / recover / invert / roundtrip / check.

Each stage reads a JSON experiment config, writes delimited outputs plus
rendered figures into the output directory, and reports through exit codes:
0 success, 1 generation or inversion failure, 2 partial recovery,
3 nothing recovered, 64 invalid config, 66 missing input file.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import forward, geodesics, recovery, report, tomography
from .errors import PhasetomoError
from .medium import (AnalyticPhantom, SurfaceConfig, check_regularity,
                     fibonacci_sphere, load_field, save_field)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_PARTIAL = 2
EXIT_NONE = 3
EXIT_USAGE = 64
EXIT_NOINPUT = 66


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

class ExperimentConfig:
    """Validated view of the experiment JSON."""

    def __init__(self, doc, base_dir):
        self.doc = doc
        self.base_dir = Path(base_dir)
        if "phantom" not in doc:
            raise ConfigError("config needs a 'phantom' section")
        kg = doc.get("kgrid", {})
        k_min = float(kg.get("k_min", 50.0))
        k_max = float(kg.get("k_max", 500.0))
        if not k_min < k_max:
            raise ConfigError("kgrid needs k_min < k_max")
        self.seed = int(doc.get("seed", 0))

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls(doc, path.parent)

    def field(self):
        ph = self.doc["phantom"]
        if "file" in ph:
            target = self.base_dir / ph["file"]
            if not target.exists():
                raise FileNotFoundError(target)
            return load_field(target)
        kind = ph.get("kind", "analytic-phantom")
        if kind != "analytic-phantom":
            raise ConfigError(f"inline phantom must be analytic, got {kind!r}")
        return AnalyticPhantom(profile=ph.get("profile", "gaussian"),
                               center=ph.get("center", (0.0, 0.0, 0.0)),
                               epsilon=float(ph.get("epsilon", 0.1)),
                               sigma=float(ph.get("sigma", 0.5)),
                               support_radius=float(ph.get("support_radius", 1.0)))

    def surface(self):
        sc = self.doc.get("surface", {})
        kind = sc.get("kind", "sphere")
        if kind != "sphere":
            raise ConfigError("only sphere surfaces are configurable for now")
        center = sc.get("center", (0.0, 0.0, 0.0))
        radius = float(sc.get("radius", 2.0))
        if "sources" in sc or "receivers" in sc:
            src = np.asarray(sc["sources"], dtype=float)
            rcv = np.asarray(sc["receivers"], dtype=float)
            return SurfaceConfig(kind="sphere", center=center, radius=radius,
                                 sources=src, receivers=rcv)
        from .medium import sphere_surface
        return sphere_surface(radius, int(sc.get("n_sources", 8)),
                              int(sc.get("n_receivers", 8)), center,
                              layout=sc.get("layout", "antipodal"))

    def kgrid(self):
        kg = self.doc.get("kgrid", {})
        k_min = float(kg.get("k_min", 50.0))
        k_max = float(kg.get("k_max", 500.0))
        if "dk" in kg:
            return forward.KGrid(k_min, k_max, float(kg["dk"]))
        alpha_max = kg.get("alpha_max")
        if alpha_max is None:
            field = self.field()
            n00 = max(1.0, field.sup_n()) + 0.01
            alpha_max = (n00 - 1.0) * 2.0 * field.support_radius
        return forward.KGrid.for_alpha(float(alpha_max), k_min, k_max,
                                       int(kg.get("samples_per_period", 20)))

    def remainder(self):
        rm = self.doc.get("remainder", {"kind": "none"})
        c = complex(rm.get("c_re", rm.get("c", 0.1)),
                    rm.get("c_im", 0.0)) if not isinstance(rm.get("c"), str) \
            else complex(rm["c"])
        return forward.RemainderModel(kind=rm.get("kind", "none"), c=c,
                                      seed=int(rm.get("seed", self.seed)),
                                      n_modes=int(rm.get("n_modes", 6)),
                                      omega_max=float(rm.get("omega_max", 0.25)),
                                      normalize=bool(rm.get("normalize", False)))

    def recovery_params(self, exact_a=False):
        rc = self.doc.get("recovery", {})
        return recovery.RecoveryParams(
            alpha_min=rc.get("alpha_min"),
            tail_fractions=tuple(rc["tail_fractions"]) if rc.get("tail_fractions") else None,
            tol_osc=rc.get("tol_osc"),
            exact_amplitude=exact_a)

    def invert_options(self):
        tm = self.doc.get("tomography", {})
        opts = tomography.InvertOptions()
        opts.max_outer = int(tm.get("max_outer", opts.max_outer))
        opts.min_pairs = int(tm.get("min_pairs", opts.min_pairs))
        opts.lsqr_iter = int(tm.get("lsqr_iter", opts.lsqr_iter))
        return opts

    def tomography_dims(self):
        return int(self.doc.get("tomography", {}).get("dims", 32))

    def reg_weight(self):
        return self.doc.get("tomography", {}).get("reg_weight")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_generate(config, out_dir):
    field = config.field()
    surf = config.surface()
    dataset = forward.synthesize_dataset(field, surf, config.remainder(),
                                         config.kgrid(), seed=config.seed)
    out = Path(out_dir)
    forward.write_dataset(dataset, out)
    save_field(field, out / "phantom.json")
    alphas = [s.provenance["alpha"] for s in dataset.spectra]
    print(f"generated {len(dataset.spectra)} spectra "
          f"({len(dataset.skipped_pairs)} pairs skipped)")
    print(f"alpha range: {min(alphas):.6f} .. {max(alphas):.6f}")
    print(f"travel-time solver failures: {int(dataset.table.failed.sum())}")
    return EXIT_OK


def _recover_one(args):
    spec, params = args
    return recovery.recover_batch([spec], params)[0]


def run_recover(config, out_dir, exact_a=False, jobs=1):
    out = Path(out_dir)
    manifest = out / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(manifest)
    # stage isolation: only dataset files are read here, never the phantom
    dataset = forward.read_dataset(out)
    params = config.recovery_params(exact_a=exact_a)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_recover_one,
                                 [(s, params) for s in dataset.spectra],
                                 chunksize=8))
    else:
        rows = recovery.recover_batch(dataset.spectra, params)

    for row, spec in zip(rows, dataset.spectra):
        if "tau" in spec.provenance:
            row["tau_true"] = float(spec.provenance["tau"])

    with open(out / "recovery.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", "zero_alpha", "A_hat", "alpha_hat",
                         "tau_hat", "zero_count", "fit_residual", "error"])
        for row in rows:
            writer.writerow([row["pair"], int(row["zero_alpha"]),
                             repr(float(row["A_hat"])),
                             repr(float(row["alpha_hat"])),
                             repr(float(row["tau_hat"])),
                             row["zero_count"],
                             repr(float(row["fit_residual"])),
                             row["error"]])

    # tau table for the tomography stage
    ok_rows = [(row, spec) for row, spec in zip(rows, dataset.spectra)
               if row["ok"]]
    if ok_rows:
        table = geodesics.TravelTimeTable(
            src_idx=np.array([s.provenance.get("src_id", -1) for _, s in ok_rows]),
            rcv_idx=np.array([s.provenance.get("rcv_id", -1) for _, s in ok_rows]),
            src=np.stack([s.y for _, s in ok_rows]),
            rcv=np.stack([s.x for _, s in ok_rows]),
            tau=np.array([r["tau_hat"] for r, _ in ok_rows]),
            residual=np.array([r["fit_residual"] for r, _ in ok_rows]),
            iterations=np.zeros(len(ok_rows), dtype=int),
            failed=np.zeros(len(ok_rows), dtype=bool))
        table.to_csv(out / "tau_table.csv")

    # per-pair diagnostic data and figures
    diag_dir = out / "diagnostics"
    diag_dir.mkdir(exist_ok=True)
    fig_dir = out / "figures"
    for row, spec in zip(rows, dataset.spectra):
        pair = row["pair"]
        g = zeros = None
        if row["ok"] and not row["zero_alpha"] and row["A_hat"] > 0:
            try:
                g = recovery.build_oscillation(spec, row["A_hat"])
                zeros = recovery.find_zeros(g)
            except PhasetomoError:
                g = zeros = None
        with open(diag_dir / f"pair_{pair:04d}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "f", "g", "is_zero_marker"])
            zset = set()
            if zeros is not None:
                taken = np.searchsorted(spec.k, zeros.zeros)
                zset = set(int(t) for t in np.clip(taken, 0, len(spec.k) - 1))
            for i, (kv, fv) in enumerate(zip(spec.k, spec.f)):
                gv = g.g[i] if g is not None else ""
                writer.writerow([repr(float(kv)), repr(float(fv)),
                                 repr(float(gv)) if gv != "" else "",
                                 1 if i in zset else 0])
        report.spectrum_figure(spec, fig_dir / f"pair_{pair:04d}.png",
                               g=g, zeros=zeros,
                               title=f"pair {pair}: "
                                     f"{'alpha=0' if row['zero_alpha'] else 'beat'}")

    report.recovery_summary_figure(rows, fig_dir / "recovery_summary.png")
    report.recovery_error_figure(rows, fig_dir / "recovery_error.png")

    n_ok = sum(1 for r in rows if r["ok"])
    scored = [abs(r["tau_hat"] - r["tau_true"]) / r["tau_true"]
              for r in rows if r["ok"] and r.get("tau_true")]
    print(f"recovered {n_ok}/{len(rows)} pairs")
    if scored:
        print(f"median relative tau error vs provenance: "
              f"{float(np.median(scored)):.3e}")
    if n_ok == 0:
        return EXIT_NONE
    return EXIT_OK if n_ok == len(rows) else EXIT_PARTIAL


def run_invert(config, out_dir):
    out = Path(out_dir)
    table_path = out / "tau_table.csv"
    if not table_path.exists():
        raise FileNotFoundError(table_path)
    table = geodesics.TravelTimeTable.from_csv(table_path)
    field = config.field()
    init = tomography.vacuum_model(field.support_center, field.support_radius,
                                   dims=config.tomography_dims())
    model = tomography.invert(table, init, reg=config.reg_weight(),
                              budget=config.invert_options())
    model.save(out / "model.json")
    model.history_to_csv(out / "history.csv")
    fig_dir = out / "figures"
    report.misfit_history_figure(model, fig_dir / "misfit_history.png")
    report.model_slices_figure(model, fig_dir / "model_slices.png",
                               truth_field=field)

    scoring = {
        "final_misfit": model.history[-1]["misfit"],
        "iterations": len(model.history) - 1,
    }
    # ground truth scoring (synthetic runs only)
    scoring["relative_l2_error"] = tomography.support_relative_error(model, field)
    scoring["max_error"] = float(np.max(np.abs(
        model.as_field().values(model.node_positions()[model.inside_mask()])
        - field.values(model.node_positions()[model.inside_mask()]))))
    truth_model = tomography.model_from_field(field, dims=config.tomography_dims())
    tol = 1e-3 * float(np.mean(table.tau))
    consistency = tomography.consistency_check(model, truth_model,
                                               config.surface(), tol=tol)
    scoring["consistency_verdict"] = consistency.verdict
    scoring["consistency_max_gap"] = consistency.max_table_gap
    scoring["consistency_tol"] = consistency.tol
    (out / "scoring.json").write_text(
        json.dumps(scoring, indent=2, sort_keys=True) + "\n")
    print(f"final misfit {scoring['final_misfit']:.3e} after "
          f"{scoring['iterations']} accepted iterations")
    print(f"relative L2 error on support: {scoring['relative_l2_error']:.3f}")
    print(f"kinematic consistency: {scoring['consistency_verdict']}")
    return EXIT_OK


def run_check(config, out_dir):
    field = config.field()
    spacing = field.support_radius / 10.0
    rep = check_regularity(field, spacing)
    doc = {
        "verdict": rep.verdict,
        "n00": rep.n00,
        "worst_eigenvalue": rep.worst_eigenvalue,
        "worst_point": np.asarray(rep.worst_point).tolist(),
        "check_spacing": rep.check_spacing,
        "points_checked": rep.points_checked,
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "admissibility.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"regularity verdict: {rep.verdict} "
          f"(worst Hessian eigenvalue {rep.worst_eigenvalue:.3e})")
    print(f"n00 = {rep.n00:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="phasetomo",
        description="Phaseless spectra -> travel times -> refractive index")
    parser.add_argument("command",
                        choices=["generate", "recover", "invert", "roundtrip",
                                 "check"])
    parser.add_argument("--config", required=True, help="experiment JSON")
    parser.add_argument("--out", default=None,
                        help="output directory (default: config output_dir)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config master seed")
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker processes for per-pair recovery")
    parser.add_argument("--exact-a", action="store_true",
                        help="use provenance amplitudes instead of estimating")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        config = ExperimentConfig.from_file(args.config)
    except FileNotFoundError as exc:
        print(f"error: missing input file: {exc}", file=sys.stderr)
        return EXIT_NOINPUT
    except (ConfigError, ValueError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        config.seed = args.seed
        config.doc["seed"] = args.seed
    out_dir = Path(args.out or config.doc.get("output_dir", "out"))
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        if args.command == "generate":
            return run_generate(config, out_dir)
        if args.command == "recover":
            return run_recover(config, out_dir, exact_a=args.exact_a,
                               jobs=args.jobs)
        if args.command == "invert":
            return run_invert(config, out_dir)
        if args.command == "roundtrip":
            code = run_generate(config, out_dir)
            if code != EXIT_OK:
                return code
            code = run_recover(config, out_dir, exact_a=args.exact_a,
                               jobs=args.jobs)
            if code not in (EXIT_OK, EXIT_PARTIAL):
                return code
            recover_code = code
            code = run_invert(config, out_dir)
            return code if code != EXIT_OK else recover_code
        if args.command == "check":
            return run_check(config, out_dir)
    except FileNotFoundError as exc:
        print(f"error: missing input file: {exc}", file=sys.stderr)
        return EXIT_NOINPUT
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PhasetomoError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
