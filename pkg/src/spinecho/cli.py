"""Command-line front end: config ingestion, scan orchestration, CSV/JSON
artifact emission.

Config files use the same `key value unit` grammar as sequence files, with
sections [sequence], [experiment], [noise], [ensemble] and [scan]. Every
physical parameter is resolved from default < file < override and recorded
with its source in the provenance header of each artifact, so rerunning an
embedded configuration reproduces the outputs byte for byte (outputs carry
no timestamps).

Exit codes: 0 success, 2 configuration/parse failure, 3 physics or
invariant failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import ensemble as ens
from . import noise as noise_mod
from . import protocol, theory
from .constants import NEUTRON
from .errors import (ConfigurationError, Diagnostic, InvalidInputError,
                     SequenceParseError, SpinEchoError)
from .errors import E_BAD_VALUE, E_UNKNOWN_KEY
from .sequence_io import Field, read_section, tokenize, _Entry, _Section
from .waveform import adiabaticity_margin, build_echo_sequence, build_reference_sequence

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PHYSICS = 3
EXIT_IO = 4

_DEFAULT_T_GRID_MS = (35.0, 50.0, 75.0, 100.0, 150.0, 200.0, 250.0)

_SCHEMAS: dict[str, dict[str, Field]] = {
    "sequence": {
        "guide_bz": Field("quantity", "field", default=-10e-6),
        "rf_amplitude": Field("quantity", "field", default=1.6e-6),
        "offset_bx": Field("quantity", "field", default=1.883834e-6),
        "cycle_time": Field("quantity", "time", default=0.2),
        "ramp_time": Field("quantity", "time"),
        "direction": Field("int", default=1),
        "mode": Field("word", choices=("geometric", "dynamical"), default="geometric"),
        "cycles": Field("int", default=1),
        "analysis": Field("word", choices=("none", "x", "y"), default="none"),
    },
    "experiment": {
        "s0": Field("float", default=0.75),
        "t2": Field("quantity", "time", default=0.847),
        "analysis_mode": Field("word", choices=("expectation", "sampled"),
                               default="expectation"),
        "shots": Field("int", default=0),
    },
    "noise": {
        "enabled": Field("word", choices=("on", "off"), default="off"),
        "sigma_p": Field("quantity", "field", default=2e-6),
        "correlation_time": Field("quantity", "time", default=0.01),
        "sample_dt": Field("quantity", "time", default=5e-4),
        "ramp_fraction": Field("float", default=noise_mod.DEFAULT_RAMP_FRACTION),
        "cutoff_time": Field("quantity", "time", default=1.0 / noise_mod.DEFAULT_CUTOFF),
        "samples": Field("int", default=1_000_000),
    },
    "ensemble": {
        "realizations": Field("int", default=300),
        "base_seed": Field("int", default=2026),
    },
    "scan": {
        "solid_angle_min": Field("quantity", "angle", default=0.6),
        "solid_angle_max": Field("quantity", "angle", default=5.5),
        "points": Field("int", default=8),
        "T": Field("quantity", "time", repeated=True),
    },
}


class ResolvedConfig:
    """Section/key table with per-value provenance."""

    def __init__(self) -> None:
        self.table: dict[str, dict[str, tuple[object, str]]] = {}
        for section, schema in _SCHEMAS.items():
            self.table[section] = {}
            for key, spec in schema.items():
                default = spec.default
                if section == "scan" and key == "T" and not default:
                    default = [t * 1e-3 for t in _DEFAULT_T_GRID_MS]
                self.table[section][key] = (default, "default")

    def merge_file(self, text: str) -> None:
        for section in tokenize(text):
            if section.name not in _SCHEMAS:
                raise SequenceParseError(Diagnostic(
                    "E_UNKNOWN_SECTION", section.line, 1,
                    f"unknown config section [{section.name}]"))
            values = read_section(section, _SCHEMAS[section.name])
            present = {e.key for e in section.entries}
            for key in present:
                self.table[section.name][key] = (values[key], "file")

    def set_override(self, spec_text: str, source: str = "override") -> None:
        m = re.fullmatch(r"([a-z_]+)\.([a-zA-Z_0-9]+)=(.*)", spec_text.strip())
        if not m:
            raise SequenceParseError(Diagnostic(
                E_BAD_VALUE, 0, 0, f"override must be section.key=value, got {spec_text!r}"))
        section, key, raw = m.groups()
        if section not in _SCHEMAS or key not in _SCHEMAS[section]:
            raise SequenceParseError(Diagnostic(
                E_UNKNOWN_KEY, 0, 0, f"unknown config key {section}.{key}"))
        spec = _SCHEMAS[section][key]
        vm = re.fullmatch(r"([-+0-9.eE]+)\s*([a-zA-Z]*)", raw)
        if vm and spec.kind in ("quantity", "int", "float"):
            value_txt, unit = vm.group(1), vm.group(2) or None
        else:
            value_txt, unit = raw, None
        entry = _Entry(key, value_txt, unit, 0, 0, 0, 0)
        section_obj = _Section(section, 0, (entry,))
        values = read_section(section_obj, {key: spec})
        if spec.repeated:
            self.table[section][key] = (values[key], source)
        else:
            self.table[section][key] = (values[key], source)

    def value(self, section: str, key: str):
        return self.table[section][key][0]

    def provenance_lines(self) -> list[str]:
        lines = [f"# spinecho_version = {__version__}"]
        for section in sorted(self.table):
            for key in sorted(self.table[section]):
                value, source = self.table[section][key]
                if isinstance(value, float):
                    value = f"{value:.12g}"
                lines.append(f"# {section}.{key} = {value}  ({source})")
        return lines

    def as_json(self) -> dict:
        return {
            section: {key: {"value": value, "source": source}
                      for key, (value, source) in keys.items()}
            for section, keys in self.table.items()
        }


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


def _write_csv(path: Path, provenance: list[str], header: list[str],
               rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in provenance:
            fh.write(line + "\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _noise_config(cfg: ResolvedConfig, seed: int) -> noise_mod.NoiseConfig:
    return noise_mod.NoiseConfig(
        sigma_p_field=cfg.value("noise", "sigma_p"),
        gamma=1.0 / cfg.value("noise", "correlation_time"),
        sample_dt=cfg.value("noise", "sample_dt"),
        seed=seed,
        ramp_fraction=cfg.value("noise", "ramp_fraction"),
        cutoff=1.0 / cfg.value("noise", "cutoff_time"))


def _sequence(cfg: ResolvedConfig, **overrides):
    kw = dict(
        guide_bz=cfg.value("sequence", "guide_bz"),
        rf_amplitude=cfg.value("sequence", "rf_amplitude"),
        offset_bx=cfg.value("sequence", "offset_bx"),
        cycle_time=cfg.value("sequence", "cycle_time"),
        ramp_time=cfg.value("sequence", "ramp_time"),
        direction=cfg.value("sequence", "direction"),
        mode=cfg.value("sequence", "mode"),
        cycles=cfg.value("sequence", "cycles"),
        analysis=cfg.value("sequence", "analysis"))
    kw.update(overrides)
    return build_echo_sequence(**kw)


def _experiment(cfg: ResolvedConfig, sequence, noise_cfg) -> protocol.ExperimentConfig:
    return protocol.ExperimentConfig(
        sequence=sequence, noise=noise_cfg,
        initial_polarization=cfg.value("experiment", "s0"),
        t2=cfg.value("experiment", "t2"),
        analysis_mode=cfg.value("experiment", "analysis_mode"),
        shots=cfg.value("experiment", "shots"))


def _result_row(mode: str, theta: float, cycle_time: float, seed: int,
                realization: int, res: protocol.ExperimentResult) -> list:
    return [mode, theta, cycle_time * 1e3, seed, realization,
            res.azimuth_shift, res.geometric_phase, res.dynamical_phase,
            res.s_final]


RESULT_HEADER = ["mode", "theta_rad", "T_ms", "seed", "realization",
                 "azimuth_rad", "phi_g_rad", "phi_d_rad", "s_final"]


def _cmd_simulate(cfg: ResolvedConfig, out: Path, seed: int, quiet: bool) -> dict:
    seq = _sequence(cfg)
    noise_on = cfg.value("noise", "enabled") == "on"
    ncfg = _noise_config(cfg, seed) if noise_on else None
    exp = _experiment(cfg, seq, ncfg)
    trace = None
    if noise_on:
        span = seq.cycle_time * seq.cycles
        ncfg2 = replace(ncfg, sample_dt=span / math.ceil(span / ncfg.sample_dt - 1e-12))
        exp = replace(exp, noise=ncfg2)
        trace = protocol.prepare_trace(ncfg2, span, 0)
    res = protocol.run(exp, trace, keep_trajectory=True)
    prov = cfg.provenance_lines() + [f"# seed = {seed}"]
    times, blochs = res.trajectory
    fields = seq.field_at(times)
    rows = [[t, f[0], f[1], f[2], b[0], b[1], b[2]]
            for t, f, b in zip(times, fields, blochs)]
    _write_csv(out / "trajectory.csv", prov,
               ["t_s", "b_x_t", "b_y_t", "b_z_t", "bloch_x", "bloch_y", "bloch_z"],
               rows)
    _write_csv(out / "result.csv", prov, RESULT_HEADER,
               [_result_row(seq.mode, seq.theta, seq.cycle_time, seed, 0, res)])
    summary = {
        "azimuth_shift_rad": res.azimuth_shift,
        "geometric_phase_rad": res.geometric_phase,
        "dynamical_phase_rad": res.dynamical_phase,
        "s_final": res.s_final,
        "warnings": list(res.warnings),
    }
    if not quiet:
        print(f"azimuth shift {res.azimuth_shift:+.6f} rad, "
              f"phi_g {res.geometric_phase:+.6f} rad", file=sys.stderr)
    return summary


def _cmd_berry_scan(cfg: ResolvedConfig, out: Path, seed: int, quiet: bool) -> dict:
    omega_grid = np.linspace(cfg.value("scan", "solid_angle_min"),
                             cfg.value("scan", "solid_angle_max"),
                             cfg.value("scan", "points"))
    cycle_time = cfg.value("sequence", "cycle_time")
    rows = []
    phis, ctrls = [], []

    # no-evolution control: the reference sequence run against itself
    ref_seq = build_reference_sequence(_sequence(cfg, mode="geometric"))
    exp_ref = _experiment(cfg, ref_seq, None)
    phi_ref = protocol.run(exp_ref).azimuth_shift
    for om in omega_grid:
        th = theory.theta_from_berry_phase(-om / 2.0)
        bx = abs(cfg.value("sequence", "guide_bz")) / math.tan(th)
        seq_geo = _sequence(cfg, offset_bx=bx, mode="geometric")
        exp_geo = _experiment(cfg, seq_geo, None)
        res_geo = protocol.run(exp_geo)
        seq_ctl = _sequence(cfg, offset_bx=bx, mode="dynamical")
        exp_ctl = _experiment(cfg, seq_ctl, None)
        res_ctl = protocol.run(exp_ctl)
        phis.append(res_geo.geometric_phase)
        ctrls.append(res_ctl.azimuth_shift / 4.0)
        rows.append([om, th, bx * 1e6, cycle_time * 1e3, res_geo.geometric_phase,
                     res_ctl.azimuth_shift / 4.0, phi_ref, res_geo.s_final])
        if not quiet:
            print(f"Omega {om:6.3f} sr: phi_g {res_geo.geometric_phase:+.5f} rad",
                  file=sys.stderr)

    design = np.vstack([omega_grid, np.ones_like(omega_grid)]).T
    coef, residuals, *_ = np.linalg.lstsq(design, np.asarray(phis), rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    dof = max(len(phis) - 2, 1)
    resid = np.asarray(phis) - design @ coef
    sig2 = float(resid @ resid) / dof
    cov = sig2 * np.linalg.inv(design.T @ design)
    slope_se, intercept_se = float(np.sqrt(cov[0, 0])), float(np.sqrt(cov[1, 1]))

    prov = cfg.provenance_lines() + [
        f"# seed = {seed}",
        f"# fit_slope_per_sr = {slope:.12g}",
        f"# fit_slope_se = {slope_se:.12g}",
        f"# fit_intercept_rad = {intercept:.12g}",
        f"# fit_intercept_se = {intercept_se:.12g}",
    ]
    _write_csv(out / "berry_scan.csv", prov,
               ["solid_angle_sr", "theta_rad", "bx_ut", "T_ms", "phi_g_rad",
                "phi_ctrl_rad", "phi_ref_rad", "s_final"], rows)
    summary = {
        "fit": {"slope_per_sr": slope, "slope_se": slope_se,
                "intercept_rad": intercept, "intercept_se": intercept_se},
        "phi_ref_rad": phi_ref,
        "max_abs_control_rad": float(np.max(np.abs(np.asarray(ctrls) * 4.0))),
        "solid_angle_grid_sr": [float(x) for x in omega_grid],
    }
    if not quiet:
        print(f"fit slope {slope:+.4f} +- {slope_se:.4f} per sr, "
              f"intercept {intercept:+.4f} rad", file=sys.stderr)
    return summary


def _cmd_variance_scan(cfg: ResolvedConfig, out: Path, seed: int, quiet: bool,
                       jobs: int) -> dict:
    seq = _sequence(cfg)
    ncfg = _noise_config(cfg, seed)
    exp = _experiment(cfg, seq, ncfg)
    grid = tuple(cfg.value("scan", "T"))
    config = ens.EnsembleConfig(
        experiment=exp, realizations=cfg.value("ensemble", "realizations"),
        base_seed=seed, cycle_times=grid, jobs=jobs)
    points = []
    for i, t in enumerate(grid):
        points.append(ens.run_point(config, t, point_index=i))
        if not quiet:
            p = points[-1]
            print(f"T {t * 1e3:6.1f} ms: var {p.stats.variance:.5f} rad^2 "
                  f"(theory {p.theory_variance:.5f}, z {p.z_theory:+.2f})",
                  file=sys.stderr)

    rows = []
    for p in points:
        s = p.stats
        rows.append([p.cycle_time * 1e3, s.count, s.variance, s.se_variance,
                     s.mean_phase, s.se_mean, s.nu_rel, s.se_nu_rel,
                     p.theory_variance, p.z_theory, p.oracle_variance,
                     p.z_oracle, p.noise_free_phase])
    prov = cfg.provenance_lines() + [f"# seed = {seed}"]
    _write_csv(out / "variance_scan.csv", prov,
               ["T_ms", "N", "var_rad2", "var_se", "mean_rad", "mean_se",
                "nu_rel", "nu_rel_se", "theory_var_rad2", "z",
                "oracle_var_rad2", "z_oracle", "phi_free_rad"], rows)

    cmp_theory = ens.compare_to_theory(points)
    cmp_oracle = ens.compare_to_theory(points, [p.oracle_variance for p in points])
    phi0 = theory.berry_phase(seq.theta)
    drift = ens.mean_phase_drift(points, phi0)
    scale = float(np.mean([p.stats.variance / p.theory_variance for p in points]))
    gamma_noise = ncfg.gamma
    sub = [(p.cycle_time, p.stats.variance) for p in points
           if 10.0 <= gamma_noise * p.cycle_time <= 25.0]
    slope = ens.loglog_slope(*zip(*sub)) if len(sub) >= 2 else None
    summary = {
        "T_grid_ms": [t * 1e3 for t in grid],
        "realizations": config.realizations,
        "seeds": {"base_seed": seed},
        "chi2_per_dof_theory": cmp_theory.chi2_per_dof,
        "chi2_per_dof_oracle": cmp_oracle.chi2_per_dof,
        "z_theory": list(cmp_theory.z_scores),
        "z_oracle": list(cmp_oracle.z_scores),
        "mean_phase_drift_rad": drift,
        "noise_free_phase_rad": phi0,
        "variance_scale_vs_theory": scale,
        "loglog_slope_gamma_T_10_25": slope,
        "config": cfg.as_json(),
    }
    if not quiet:
        print(f"chi2/dof vs closed form {cmp_theory.chi2_per_dof:.2f}; "
              f"vs trace oracle {cmp_oracle.chi2_per_dof:.2f}; "
              f"uniform scale {scale:.3f}", file=sys.stderr)
    return summary


def _cmd_noise_psd(cfg: ResolvedConfig, out: Path, seed: int, quiet: bool,
                   export_trace: bool) -> dict:
    ncfg = _noise_config(cfg, seed)
    n = cfg.value("noise", "samples")
    duration = (n - 1) * ncfg.sample_dt
    trace = noise_mod.generate(ncfg, duration, 0)
    omega, psd = noise_mod.estimate_psd(trace)
    s2_hat, gamma_hat = noise_mod.fit_lorentzian(omega, psd)
    var = float(np.var(trace.samples))
    kurt = noise_mod.excess_kurtosis(trace)
    rho_tau = noise_mod.autocorrelation(trace, 1.0 / ncfg.gamma)
    prov = cfg.provenance_lines() + [f"# seed = {seed}"]
    _write_csv(out / "noise_psd.csv", prov, ["omega_rad_s", "psd"],
               [[w, p] for w, p in zip(omega, psd)])
    if export_trace:
        noise_mod.write_trace_csv(trace, out / "trace.csv")
    summary = {
        "samples": len(trace.samples),
        "variance_t2": var,
        "nominal_variance_t2": ncfg.sigma_p_field ** 2,
        "excess_kurtosis": kurt,
        "autocorrelation_at_1_over_gamma": rho_tau,
        "fitted_gamma_rad_s": gamma_hat,
        "fitted_sigma2_t2": s2_hat,
        "psd_integral_t2": noise_mod.psd_integral(omega, psd),
    }
    if not quiet:
        print(f"variance {var:.4g} T^2 (nominal {ncfg.sigma_p_field ** 2:.4g}), "
              f"Gamma_hat {gamma_hat:.1f} rad/s", file=sys.stderr)
    return summary


def _cmd_adiabaticity(cfg: ResolvedConfig, out: Path, seed: int, quiet: bool) -> dict:
    seq = _sequence(cfg)
    report = adiabaticity_margin(seq)
    prov = cfg.provenance_lines()
    _write_csv(out / "adiabaticity.csv", prov, ["segment_index", "margin"],
               [[i, m] for i, m in report.per_segment])
    summary = {"margin": report.margin, "exceeded": report.exceeded,
               "limit": 0.2}
    if not quiet:
        print(f"margin {report.margin:.4f} (limit 0.2)"
              + (" EXCEEDED" if report.exceeded else ""), file=sys.stderr)
    return summary


def _cmd_theory(cfg: ResolvedConfig, out: Path, seed: int, quiet: bool) -> dict:
    seq = _sequence(cfg)
    ncfg = _noise_config(cfg, seed)
    rows = []
    for t in cfg.value("scan", "T"):
        params = theory.TheoryParams(
            theta=seq.theta,
            omega_l=theory.larmor_frequency(abs(seq.guide_bz)),
            gamma_noise=ncfg.gamma,
            sigma_p_omega2=theory.sigma_field_to_omega(ncfg.sigma_p_field) ** 2,
            T=t)
        var = theory.variance_theory(params)
        rows.append([t * 1e3, var, theory.dephasing_factor(var)])
        print(f"T = {t * 1e3:7.2f} ms: sigma2 = {var:.6g} rad^2, "
              f"nu_rel = {theory.dephasing_factor(var):.6g}")
    _write_csv(out / "theory.csv", cfg.provenance_lines(),
               ["T_ms", "var_rad2", "nu_rel"], rows)
    return {
        "theta_rad": seq.theta,
        "phi_g0_rad": theory.berry_phase(seq.theta),
        "solid_angle_sr": theory.solid_angle(seq.theta),
        "omega_l_rad_s": theory.larmor_frequency(abs(seq.guide_bz)),
        "rows": [{"T_ms": r[0], "var_rad2": r[1], "nu_rel": r[2]} for r in rows],
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinecho",
        description="Spin-1/2 Berry-phase stability simulator")
    parser.add_argument("command", choices=[
        "simulate", "berry-scan", "variance-scan", "noise-psd",
        "adiabaticity-check", "theory"])
    parser.add_argument("--config", type=Path, help="config file path")
    parser.add_argument("--out", type=Path, default=Path("spinecho-out"),
                        help="output directory (created if missing)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the ensemble/noise base seed")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE[UNIT]",
                        help="override a config key (repeatable)")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes")
    parser.add_argument("--quiet", action="store_true")
    parser.add_argument("--export-trace", action="store_true",
                        help="noise-psd: also write the raw trace CSV")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ResolvedConfig()
        if args.config is not None:
            cfg.merge_file(Path(args.config).read_text(encoding="utf-8"))
        for spec in args.overrides:
            cfg.set_override(spec)
        seed = args.seed if args.seed is not None else cfg.value("ensemble", "base_seed")
        if args.seed is not None:
            cfg.table["ensemble"]["base_seed"] = (seed, "override")
    except SequenceParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        if args.command == "simulate":
            summary = _cmd_simulate(cfg, out, seed, args.quiet)
        elif args.command == "berry-scan":
            summary = _cmd_berry_scan(cfg, out, seed, args.quiet)
        elif args.command == "variance-scan":
            summary = _cmd_variance_scan(cfg, out, seed, args.quiet, args.jobs)
        elif args.command == "noise-psd":
            summary = _cmd_noise_psd(cfg, out, seed, args.quiet, args.export_trace)
        elif args.command == "adiabaticity-check":
            summary = _cmd_adiabaticity(cfg, out, seed, args.quiet)
        else:
            summary = _cmd_theory(cfg, out, seed, args.quiet)
        payload = {"command": args.command, "config": cfg.as_json(),
                   "seed": seed, "summary": summary}
        _write_json(out / "summary.json", payload)
    except SequenceParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigurationError, InvalidInputError, SpinEchoError) as exc:
        print(f"physics/configuration failure: {exc}", file=sys.stderr)
        return EXIT_PHYSICS
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
