"""Command-line driver.

    o2hopf <command> [--config FILE] [--output-dir DIR] [--threads N] [--seed N]

Commands: profile, spectrum, evans, crossing, energy-check, reduce,
bifurcate, verify, selftest.  Each writes its tables and a manifest.json to
the output directory.  Exit codes: 0 success, 2 validation error,
3 numerical failure, 4 I/O error; on failure an error JSON goes to stderr
and to error.json in the output directory.

Environment: O2HOPF_OUTPUT_DIR and O2HOPF_THREADS override the config file
(command-line flags override both).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from .config import COMMANDS, RunConfig, dump_config, load_config
from .errors import IoError, NumericalError, O2HopfError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class Context:
    """Lazily built objects shared by the commands of one run."""

    def __init__(self, config: RunConfig, out: Path):
        self.cfg = config
        self.out = out
        self.files: List[Path] = []
        self._model = None
        self._grid = None
        self._crossing = None

    @property
    def tol(self):
        return self.cfg.tolerances

    @property
    def grid(self):
        if self._grid is None:
            from .model_pde import DiscretizationGrid
            g = self.cfg.grid
            self._grid = DiscretizationGrid(g.L, g.N1, g.K, g.dt)
        return self._grid

    @property
    def model(self):
        if self._model is None:
            from .model_pde import build_model, tune_m0
            m = build_model(self.cfg.model.id, self.cfg.model.params)
            if self.cfg.model.id == "M0" and self.cfg.model.tune and not m.linear:
                m = tune_m0(m.p, self.grid, self.cfg.eps.k_star)
            self._model = m
        return self._model

    def profile(self, eps: Optional[float] = None):
        from .model_pde import make_profile
        t = self.tol
        eps = self.cfg.eps.base if eps is None else eps
        return make_profile(self.model, eps, self.grid, tol=t.profile, endstate_tol=t.profile_endstate,
                            max_iter=t.profile_max_iter)

    @property
    def crossing(self):
        if self._crossing is None:
            from .spectral import find_crossing
            t = self.tol
            self._crossing = find_crossing(self.model, self.grid, tuple(self.cfg.eps.crossing_interval),
                                           tol=t.crossing, d_eps=t.crossing_d_eps, max_iter=t.crossing_max_iter)
        return self._crossing

    def reduction_tolerances(self) -> dict:
        t = self.tol
        return dict(picard_tol=t.picard, picard_max=t.picard_max, null_tol=t.null_tol, cond_max=t.cond_max,
                    smallness=t.smallness)

    def setup(self, eps: float, nsteps: Optional[int] = None):
        from .reduction import channel_setup
        return channel_setup(self.model, self.grid, eps, crossing=self.crossing, nsteps=nsteps,
                             **self.reduction_tolerances())

    def table(self, stem: str, columns) -> None:
        from .io import write_table
        self.files += write_table(self.out, stem, columns)

    def json(self, name: str, payload) -> None:
        from .io import write_json
        self.files.append(write_json(self.out / name, payload))

    def fit(self, setup):
        from .reduction import fit_coefficients
        t = self.tol
        return fit_coefficients(setup, t.fit_sample_radius, t.fit_samples, t.fit_spurious, t.fit_picard,
                                t.fit_max_halvings, t.fit_quintic_limit)


# --------------------------------------------------------------------------
# commands; each returns the results block of the manifest


def cmd_profile(ctx: Context) -> dict:
    prof = ctx.profile()
    cols = {"x": list(prof.x)}
    for i in range(prof.samples.shape[0]):
        cols[f"u{i + 1}"] = list(prof.samples[i])
    ctx.table("profile", cols)
    return prof.to_dict()


def cmd_spectrum(ctx: Context) -> dict:
    from .spectral import assemble_Lk, spectrum_in_region
    prof = ctx.profile()
    sp = ctx.cfg.spectrum
    cols: Dict[str, list] = {"k": [], "lambda": [], "residual": []}
    counts = {}
    for k in sp.modes:
        pairs = spectrum_in_region(assemble_Lk(ctx.model, prof, k), sp.region, tol=ctx.tol.eigen_residual,
                                   method=sp.method, nev=sp.nev)
        counts[str(k)] = len(pairs)
        for p in pairs:
            cols["k"].append(k)
            cols["lambda"].append(complex(p.value))
            cols["residual"].append(p.residual)
    if not cols["lambda"]:
        cols = {"k": [], "lambda_re": [], "lambda_im": [], "residual": []}
    ctx.table("spectrum", cols)
    return {"region": list(sp.region), "counts": counts}


def _contour_points(c):
    from .spectral import circle, rectangle
    if c.shape == "circle":
        return circle(complex(*c.center), c.radius, c.points)
    return rectangle(*c.bounds, n_edge=max(2, c.points // 4))


def cmd_evans(ctx: Context) -> dict:
    import numpy as np
    from .spectral import EvansFunction, assemble_Lk, count_inside, evans_winding, spectrum_in_region
    ev = ctx.cfg.evans
    t = ctx.tol
    prof = ctx.profile()
    rows: Dict[str, list] = {"contour": [], "k": [], "winding": [], "eigen_count": [], "points": []}
    details = []
    for i, c in enumerate(ev.contours):
        pts = _contour_points(c)
        D = EvansFunction(ctx.model, ctx.cfg.eps.base, c.k, L=ev.L, rtol=t.evans_rtol, atol=t.evans_atol)
        w = evans_winding(D, pts, gap_lemma=ev.gap_lemma, max_points=t.evans_max_points, root_tol=t.evans_root)
        box = (pts.real.min(), pts.real.max(), pts.imag.min(), pts.imag.max())
        pairs = spectrum_in_region(assemble_Lk(ctx.model, prof, c.k), box, tol=t.eigen_residual)
        n_eig = count_inside([p.value for p in pairs], pts)
        rows["contour"].append(i)
        rows["k"].append(c.k)
        rows["winding"].append(w.count)
        rows["eigen_count"].append(n_eig)
        rows["points"].append(len(w.points))
        details.append({"contour": i, "winding": w.count, "eigen_count": n_eig, "agree": w.count == n_eig,
                        "min_abs_ratio": w.min_abs})
        ctx.table(f"evans_contour{i}", {"lambda": list(w.points), "D": list(np.asarray(w.values))})
    ctx.table("evans", rows)
    return {"contours": details, "all_agree": all(d["agree"] for d in details)}


def cmd_crossing(ctx: Context) -> dict:
    cr = ctx.crossing
    ctx.json("crossing.json", cr.to_dict())
    return cr.to_dict()


def cmd_energy_check(ctx: Context) -> dict:
    import numpy as np
    from .model_pde import Stepper, energy_history, linearization_error, random_field
    e = ctx.cfg.energy
    prof = ctx.profile()
    st = Stepper(ctx.model, prof)
    rng = np.random.default_rng(ctx.cfg.seed)
    base = random_field(ctx.grid, ctx.model.n, rng, 1.0, kmax=min(2, ctx.grid.K))
    amps = [e.base_amplitude / 2 ** i for i in range(e.halvings + 1)]
    errs = [linearization_error(ctx.model, prof, base * a, e.T, stepper=st).err for a in amps]
    ratios = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    C, D = [], []
    for a in e.amplitudes:
        hist = energy_history(st, base * a, e.T, s=e.s)
        C.append(hist.max_ratio)
        D.append(float(hist.dissipation[-1]))
    slope = float(np.polyfit(np.log(e.amplitudes), np.log(D), 1)[0]) if len(D) > 1 else float("nan")
    ctx.table("linearization_error", {"amplitude": amps, "error": errs})
    ctx.table("energy", {"amplitude": list(e.amplitudes), "max_energy_ratio": C, "dissipation": D})
    return {"halving_ratios": ratios, "energy_constant_spread": max(C) / min(C), "energy_constant": max(C),
            "dissipation_exponent": slope}


def _fit_payload(ctx: Context, fit) -> dict:
    from .reduced_o2 import check_genericity
    rep = check_genericity(fit.coefficients(), tol=ctx.tol.genericity)
    out = fit.to_dict()
    out["generic"] = rep.generic
    out["genericity_failures"] = list(rep.failures())
    return out


def cmd_reduce(ctx: Context) -> dict:
    setup = ctx.setup(ctx.crossing.eps0)
    fit = ctx.fit(setup)
    payload = _fit_payload(ctx, fit)
    payload["setup"] = setup.to_dict()
    ctx.json("coefficients.json", payload)
    return payload


def cmd_bifurcate(ctx: Context) -> dict:
    import numpy as np
    from .model_pde import ChannelField, save_checkpoint
    from .reduced_o2 import BranchKind, fit_exponent
    from .reduction import locate_periodic_orbits
    from .io import write_outputs
    t = ctx.tol
    base = ctx.setup(ctx.crossing.eps0)
    fit = ctx.fit(base)
    ctx.json("coefficients.json", _fit_payload(ctx, fit))
    nsteps = base.system.nsteps
    recs = locate_periodic_orbits(lambda e: ctx.setup(e, nsteps=nsteps), ctx.cfg.eps.values, fit.coefficients(),
                                  newton_tol=t.newton, max_iter=t.newton_max_iter, picard_tol=t.fit_picard,
                                  fd_step=t.newton_fd_step)
    dicts = []
    for i, r in enumerate(recs):
        d = r.to_dict()
        if r.v0 is not None and r.kind != BranchKind.TRIVIAL:
            path = ctx.out / f"orbit_{i:02d}.o2hf"
            save_checkpoint(path, ChannelField(r.v0, ctx.grid))
            ctx.files.append(path)
            d["checkpoint"] = path.name
        dicts.append(d)
    summary = write_outputs(dicts, ctx.out)
    ctx.files += [Path(f) for f in summary["files"]]
    slopes = {}
    for kind in (BranchKind.TRAVELING1, BranchKind.STANDING):
        pts = [(r.eps, r.amplitude) for r in recs if r.kind == kind and r.converged and r.eps > 0]
        if len(pts) >= 2:
            slopes[kind.value] = fit_exponent([p[0] for p in pts], [p[1] for p in pts])
    worst = max((r.check.return_residual for r in recs if r.check is not None), default=0.0)
    return {"orbits": len(recs), "converged": sum(r.converged for r in recs), "amplitude_exponents": slopes,
            "max_return_residual": worst, "return_ok": bool(worst <= t.return_residual),
            "coefficients": {"Lambda": fit.Lambda, "Gamma": fit.Gamma, "kappa": fit.kappa, "chi": fit.chi}}


def cmd_verify(ctx: Context) -> dict:
    """Symmetry and structure checks on the configured model, plus re-verification
    of orbits stored by a previous bifurcate run in the same output directory."""
    from .model_pde import load_checkpoint, structural_checks
    from .reduced_o2 import BranchKind
    from .reduction import verify_orbit
    from .spectral import compute_projections, eigendata, verify_equivariance
    from .io import read_json
    t = ctx.tol
    prof = ctx.profile()
    out = {"structure": structural_checks(ctx.model, seed=ctx.cfg.seed).to_dict(),
           "equivariance": verify_equivariance(ctx.model, prof, seed=ctx.cfg.seed, tol=t.symmetry).to_dict()}
    if ctx.cfg.model.id == "M0":
        from .spectral import projection_diagnostics
        bundle = eigendata(ctx.model, ctx.grid, ctx.cfg.eps.base, ctx.cfg.eps.k_star)
        out["projections"] = projection_diagnostics(bundle, seed=ctx.cfg.seed)
        out["biorthogonality"] = bundle.biorthogonality
    stored = ctx.out / "orbits.json"
    rows: Dict[str, list] = {"eps": [], "kind": [], "return_residual": [], "shift_residual": []}
    if stored.exists():
        setups = {}
        for r in read_json(stored):
            if "checkpoint" not in r:
                continue
            v0 = load_checkpoint(ctx.out / r["checkpoint"]).coeffs
            eps = r["eps"]
            if eps not in setups:
                setups[eps] = ctx.setup(eps)
            chk = verify_orbit(setups[eps], v0, r["T"], BranchKind(r["kind"]))
            rows["eps"].append(eps)
            rows["kind"].append(r["kind"])
            rows["return_residual"].append(chk.return_residual)
            rows["shift_residual"].append(chk.shift_residual)
        ctx.table("verify_orbits", rows)
        out["orbits_ok"] = all(x <= t.return_residual for x in rows["return_residual"])
    ctx.json("verify.json", out)
    return out


def cmd_selftest(ctx: Context) -> dict:
    from .reduced_o2 import BranchKind
    from .reduction import fit_coefficients, locate_periodic_orbits
    from .synthetic import SyntheticParams, synthetic_setup
    t = ctx.tol
    p = SyntheticParams()
    tols = ctx.reduction_tolerances()
    fit = fit_coefficients(synthetic_setup(p, **tols), t.fit_sample_radius, t.fit_samples, t.fit_spurious,
                           t.fit_picard, t.fit_max_halvings, t.fit_quintic_limit)
    err_L = abs(fit.Lambda - p.Lambda) / abs(p.Lambda)
    err_G = abs(fit.Gamma - p.Gamma) / abs(p.Gamma)
    recs = locate_periodic_orbits(lambda e: synthetic_setup(p, eps=e, **tols), [0.01], fit.coefficients(),
                                  newton_tol=t.newton, max_iter=t.newton_max_iter, picard_tol=t.fit_picard,
                                  fd_step=t.newton_fd_step)
    orbit_ok = all(r.converged and r.check.return_residual <= t.return_residual for r in recs)
    trav = [r for r in recs if r.kind == BranchKind.TRAVELING1]
    ok = err_L <= t.fit_recovery and err_G <= t.fit_recovery and fit.spurious_ok and orbit_ok
    payload = {"prescribed": {"Lambda": p.Lambda, "Gamma": p.Gamma, "kappa": p.kappa, "chi": p.chi},
               "fit": fit.to_dict(), "relative_error": {"Lambda": err_L, "Gamma": err_G},
               "orbits": [r.to_dict() for r in recs],
               "traveling_speed": trav[0].check.traveling_speed if trav else None, "passed": ok}
    ctx.json("selftest.json", payload)
    if not ok:
        raise SelftestFailure(f"synthetic recovery failed: Lambda {err_L:.2e}, Gamma {err_G:.2e}, "
                              f"spurious ok {fit.spurious_ok}, orbits ok {orbit_ok}")
    return {"relative_error": {"Lambda": err_L, "Gamma": err_G}, "spurious_ok": fit.spurious_ok,
            "orbits_ok": orbit_ok}


class SelftestFailure(NumericalError):
    pass


HANDLERS: Dict[str, Callable[[Context], dict]] = {
    "profile": cmd_profile,
    "spectrum": cmd_spectrum,
    "evans": cmd_evans,
    "crossing": cmd_crossing,
    "energy-check": cmd_energy_check,
    "reduce": cmd_reduce,
    "bifurcate": cmd_bifurcate,
    "verify": cmd_verify,
    "selftest": cmd_selftest,
}


# --------------------------------------------------------------------------
# entry points


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, (IoError, OSError)):
        return EXIT_IO
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_NUMERICAL


def error_payload(exc: BaseException, command: str) -> dict:
    out = {"command": command, "error": type(exc).__name__, "message": str(exc), "exit_code": exit_code(exc)}
    for attr in ("key", "line", "column"):
        if getattr(exc, attr, None) is not None:
            out[attr] = getattr(exc, attr)
    return out


def resolve_config(config: RunConfig, output_dir: Optional[str] = None, threads: Optional[int] = None,
                   seed: Optional[int] = None, environ=os.environ) -> RunConfig:
    """Apply environment and command-line overrides (flags win)."""
    if environ.get("O2HOPF_OUTPUT_DIR"):
        config.output_dir = environ["O2HOPF_OUTPUT_DIR"]
    if environ.get("O2HOPF_THREADS"):
        try:
            config.threads = int(environ["O2HOPF_THREADS"])
        except ValueError:
            from .errors import InvalidInput
            raise InvalidInput(f"O2HOPF_THREADS must be an integer, got {environ['O2HOPF_THREADS']!r}") from None
    if output_dir is not None:
        config.output_dir = output_dir
    if threads is not None:
        config.threads = threads
    if seed is not None:
        config.seed = seed
    return config


def run(command: str, config: RunConfig) -> dict:
    """Run one command; returns the manifest results.  Raises package errors."""
    config.validate(command)
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc.strerror}") from None
    from .io import write_manifest
    ctx = Context(config, out)
    results = HANDLERS[command](ctx)
    write_manifest(out, command, config.to_dict(), ctx.files, results, extra={"threads": config.threads})
    return results


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="o2hopf", description="O(2) Hopf bifurcation toolkit for planar shocks")
    ap.add_argument("command", choices=COMMANDS + ("dump-config",))
    ap.add_argument("--config", "-c", help="YAML run configuration (defaults are used when omitted)")
    ap.add_argument("--output-dir", "-o")
    ap.add_argument("--threads", type=int)
    ap.add_argument("--seed", type=int)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    config = None
    try:
        config = load_config(args.config) if args.config else RunConfig()
        config = resolve_config(config, args.output_dir, args.threads, args.seed)
        if command == "dump-config":
            sys.stdout.write(dump_config(config))
            return EXIT_OK
        for var in _THREAD_VARS:
            os.environ.setdefault(var, str(config.threads))
        results = run(command, config)
    except O2HopfError as exc:
        return _report(exc, command, config)
    except OSError as exc:
        return _report(IoError(str(exc)), command, config)
    print(json.dumps({"command": command, "status": "ok", "output_dir": config.output_dir}))
    return EXIT_OK


def _report(exc: BaseException, command: str, config: Optional[RunConfig]) -> int:
    payload = error_payload(exc, command)
    text = json.dumps(payload)
    print(text, file=sys.stderr)
    if config is not None:
        try:
            d = Path(config.output_dir)
            if d.is_dir():
                (d / "error.json").write_text(text + "\n")
        except OSError:
            pass
    return payload["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
