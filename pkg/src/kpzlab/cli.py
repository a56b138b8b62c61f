"""Command line harness: ``kpzlab <command> [config.json] [--flags]``.

Every run writes its effective configuration, one or more CSV tables and a
``summary.txt`` into the output directory. Exit codes: 0 success, 1 bad
configuration, 2 a checked property failed, 3 a numerical consistency check
failed.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_ASSERT, EXIT_NUMERIC = 0, 1, 2, 3

REQUIRED = object()


class ConfigError(ValueError):
    pass


def _floats(v):
    if isinstance(v, str):
        return [float(s) for s in v.split(",") if s.strip()]
    if isinstance(v, (int, float)):
        return [float(v)]
    return [float(s) for s in v]


def _ints(v):
    """``"0,1,5"``, ``"0:50"`` (a range) or a JSON list; a bare JSON integer ``n`` means ``range(n)``."""
    if isinstance(v, str):
        if ":" in v:
            lo, hi = v.split(":")
            return list(range(int(lo), int(hi)))
        return [int(s) for s in v.split(",") if s.strip()]
    if isinstance(v, int):
        return list(range(v))
    return [int(s) for s in v]


def _json_list(v):
    v = json.loads(v) if isinstance(v, str) else v
    if not isinstance(v, list):
        raise ValueError("expected a JSON list")
    return v


def _family(v):
    if isinstance(v, dict):
        return v
    v = str(v)
    if v.startswith("{"):
        return json.loads(v)
    if v.startswith("poly:"):
        return {"family": "poly", "coeffs": _floats(v[5:])}
    return {"family": v}


# key -> (parser, default); REQUIRED marks physics parameters without defaults
SCHEMAS = {
    "field-check": {
        "eps": (_floats, REQUIRED), "seed": (int, REQUIRED), "n_paths": (int, 500), "n_disp": (int, 10),
        "lambda_max": (float, 10.0),
    },
    "coupling": {
        "F": (_family, REQUIRED), "sigma_sq": (float, None), "seed": (int, 0), "n_mc": (int, 10_000_000),
    },
    "renorm": {
        "F": (_family, REQUIRED), "eps": (_floats, REQUIRED), "seed": (int, REQUIRED),
        "n_samples": (int, 1_000_000), "n_max": (int, 24),
    },
    "wick-verify": {
        "seed": (int, REQUIRED), "n_odd": (int, 1), "n_even": (int, 1), "K": (int, 2),
        "removal": (_json_list, REQUIRED), "n_configs": (int, 500), "eps": (_floats, [0.02, 0.05, 0.1]),
        "N_max": (int, 6), "theta_max": (float, 10.0), "bound": (float, 1e3),
    },
    "model-scaling": {
        "symbol": (str, REQUIRED), "F": (_family, REQUIRED), "eps": (float, REQUIRED), "seed": (int, REQUIRED),
        "lambdas": (_floats, [0.05, 0.1, 0.2, 0.4]), "n_paths": (int, 500), "order": (int, 2),
    },
    "simulate": {
        "F": (_family, REQUIRED), "eps": (float, REQUIRED), "seed": (int, REQUIRED), "T": (float, 0.25),
        "c_eps": (float, None), "initial": (str, "zero"), "format": (str, "csv"), "record_every": (int, 16),
    },
    "compare": {
        "F": (_family, REQUIRED), "eps": (_floats, REQUIRED), "seeds": (_ints, REQUIRED), "T": (float, 0.25),
        "a": (_floats, None), "record_every": (int, 64), "eta": (float, 0.25),
    },
}

HELP = {
    "field-check": "kernel identity, correlation sandwich and sampled correlations.\n"
                   "CSV kernel.csv: t, x, numeric, half_P, rel_err; sandwich.csv: eps, t, x, rho, lambda;\n"
                   "samples.csv: eps, t, x, estimate, stderr, exact, z",
    "coupling": "sigma^2, a and a_hat by quadrature with a Monte Carlo cross-check.\n"
                "CSV coupling.csv: quantity, quadrature, mc, mc_stderr, z",
    "renorm": "renormalisation constants per eps and their log(1/eps) slopes.\n"
              "CSV constants.csv: eps, a, c2, c220, c220_se, c211, c211_se, c220p, c220p_se, c_eps, c_eps_se",
    "wick-verify": "general-bound ensemble from a scenario file.\n"
                   "CSV trials.csv: trial, eps, lhs, ratio_N1 .. ratio_Nmax",
    "model-scaling": "moment scaling of a model symbol.\nCSV moments.csv: lambda, moment, stderr",
    "simulate": "one path of the growth model.\nCSV field.csv: t, x, value (or field.bin with a 32-byte header)",
    "compare": "coupled growth model vs Hopf-Cole experiment.\n"
               "CSV errors.csv: eps, seed, a, sup_error, holder_error, drift_fit, blowup_flag",
}


def resolve_config(command, file_cfg, flag_cfg):
    """Merge file and flags (flags win), parse values and reject unknown keys."""
    schema = SCHEMAS[command]
    merged = dict(file_cfg)
    merged.update({k: v for k, v in flag_cfg.items() if v is not None})
    unknown = sorted(set(merged) - set(schema) - {"out", "workers", "plot"})
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {unknown}")
    out = {}
    for key, (parse, default) in schema.items():
        if key in merged:
            try:
                out[key] = parse(merged[key]) if merged[key] is not None else None
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {key!r}")
        else:
            out[key] = default
    out["out"] = merged.get("out") or os.path.join("kpzlab-out", command)
    out["workers"] = int(merged["workers"]) if merged.get("workers") is not None else None
    out["plot"] = bool(merged.get("plot", False))
    return out


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def emit_report(path, title, lines, checks=()):
    """Summary text: one line per measured quantity, then one line per check.

    ``checks`` holds ``(name, passed, realized, required)``; failures show
    both values.
    """
    with open(path, "w") as fh:
        fh.write(f"# {title}\n")
        for ln in lines:
            fh.write(ln + "\n")
        for name, ok, realized, required in checks:
            status = "PASS" if ok else "FAIL"
            fh.write(f"{status} {name}: realized {realized}, required {required}\n")
    return path


def _nl(cfg):
    from .nonlin import make_nonlinearity

    return make_nonlinearity(cfg["F"])


# ---------------------------------------------------------------- commands


def cmd_field_check(cfg):
    from . import field

    out = cfg["out"]
    t, x = field.kernel_identity_grid()
    num, ref, err = field.kernel_identity_check(t, x)
    write_csv(os.path.join(out, "kernel.csv"), ["t", "x", "numeric", "half_P", "rel_err"], zip(t, x, num, ref, err))
    checks = [("kernel identity max rel err", float(err.max()) < 1e-4, f"{err.max():.3e}", "< 1e-4")]
    lines = [f"kernel_identity_max_rel_err = {err.max():.6e} (quadrature rtol 1e-11)"]
    srows, samp = [], []
    for eps in cfg["eps"]:
        corr = field.CorrelationFn(eps)
        ts, xs = field.sandwich_grid(eps)
        lam, per = corr.sandwich_lambda(ts, xs)
        rho = corr(ts, xs)
        srows += [(eps, a, b, c, d) for a, b, c, d in zip(ts, xs, rho, per)]
        lines.append(f"eps={eps}: sandwich Lambda = {lam:.6f}")
        checks.append((f"sandwich eps={eps}", lam <= cfg["lambda_max"], f"{lam:.4f}", f"<= {cfg['lambda_max']}"))
        rows, ok = field.sample_correlation_check(eps, cfg["n_paths"], cfg["n_disp"], cfg["seed"],
                                                  workers=cfg["workers"] or 1)
        samp += [(eps, *r) for r in rows]
        zmax = max(abs(r[5]) for r in rows)
        lines.append(f"eps={eps}: sampled correlations max |z| = {zmax:.3f} over {cfg['n_paths']} paths")
        checks.append((f"sampled correlation eps={eps}", ok, f"max|z|={zmax:.3f}", "<= 3"))
    write_csv(os.path.join(out, "sandwich.csv"), ["eps", "t", "x", "rho", "lambda"], srows)
    write_csv(os.path.join(out, "samples.csv"), ["eps", "t", "x", "estimate", "stderr", "exact", "z"], samp)
    return lines, checks, None


def cmd_coupling(cfg):
    from .nonlin import coupling_constant, coupling_constant_mc
    from .renorm import whole_line_sigma_sq

    F = _nl(cfg)
    s2 = cfg["sigma_sq"] if cfg["sigma_sq"] is not None else whole_line_sigma_sq()
    gm = coupling_constant(F, s2)
    a_mc, a_se, ah_mc, ah_se = coupling_constant_mc(F, s2, cfg["n_mc"], cfg["seed"])
    za = (gm.a - a_mc) / a_se if a_se > 0 else 0.0
    zh = (gm.a_hat - ah_mc) / ah_se if ah_se > 0 else 0.0
    write_csv(os.path.join(cfg["out"], "coupling.csv"), ["quantity", "quadrature", "mc", "mc_stderr", "z"],
              [("sigma_sq", s2, s2, 0.0, 0.0), ("a", gm.a, a_mc, a_se, za), ("a_hat", gm.a_hat, ah_mc, ah_se, zh)])
    lines = [f"sigma_sq = {s2:.12g}", f"a = {gm.a:.12g} (quadrature order {gm.quadrature_order}; "
             f"MC {a_mc:.8g} +- {a_se:.2g})", f"a_hat = {gm.a_hat:.12g} (MC {ah_mc:.8g} +- {ah_se:.2g})"]
    checks = [("a quadrature vs MC", abs(za) <= 3, f"z={za:.3f}", "|z| <= 3"),
              ("a_hat quadrature vs MC", abs(zh) <= 3, f"z={zh:.3f}", "|z| <= 3")]
    return lines, checks, None


def cmd_renorm(cfg):
    from . import renorm

    F = _nl(cfg)
    eps_list = sorted(cfg["eps"])
    if len(eps_list) >= 4:
        rep = renorm.log_cancellation_check(F, eps_list, cfg["n_samples"], cfg["seed"], cfg["n_max"],
                                            workers=cfg["workers"])
        rows = rep["rows"]
    else:
        rep = None
        rows = [renorm.compute_constants(F, e, cfg["n_samples"], cfg["seed"], cfg["n_max"], workers=cfg["workers"])
                for e in eps_list]
    table = []
    lines = []
    for r in rows:
        eb = r.error_bars
        table.append((r.eps, r.a, r.c2, r.c220, eb["c220"], r.c211, eb["c211"], r.c220p, eb["c220p"],
                      r.c_eps, eb["c_eps"]))
        lines.append(f"eps={r.eps}: C_eps = a*C2 + a^3*(C220 + 4*C211 + C220p) = {r.a:.10g}*{r.c2:.10g} + "
                     f"{r.a:.10g}^3*({r.c220:.6g} + 4*{r.c211:.6g} + {r.c220p:.6g}) = {r.c_eps:.10g} "
                     f"+- {eb['c_eps']:.2g}")
        if not r.check_assembly():
            raise renorm.ConsistencyError("assembled C_eps does not match its parts")
    write_csv(os.path.join(cfg["out"], "constants.csv"),
              ["eps", "a", "c2", "c220", "c220_se", "c211", "c211_se", "c220p", "c220p_se", "c_eps", "c_eps_se"],
              table)
    checks = []
    if rep is not None:
        for k in ("slope_c220", "slope_c211", "slope_combined"):
            lines.append(f"{k} = {rep[k][0]:.6g} +- {rep[k][1]:.2g}")
        lines.append(f"c220p relative spread = {rep['c220p_spread']:.4g}")
        checks = [("c220 and c211 diverge (|slope| > 5 se)", rep["divergent"],
                   f"{rep['slope_c220'][0]:.4g}/{rep['slope_c211'][0]:.4g}", "> 5 se"),
                  ("c220 + 4 c211 slope within 2 se of 0", rep["cancels"],
                   f"{rep['slope_combined'][0]:.4g} +- {rep['slope_combined'][1]:.2g}", "|slope| <= 2 se"),
                  ("c220p spread < 10%", rep["c220p_bounded"], f"{rep['c220p_spread']:.4g}", "< 0.1")]
    return lines, checks, None


def cmd_wick_verify(cfg):
    from . import wick

    space = wick.TypeSpace.make(cfg["n_odd"], cfg["n_even"])
    M = [tuple(int(v) for v in m) for m in cfg["removal"]]
    res = wick.general_bound_ensemble(space, cfg["K"], M, cfg["n_configs"], cfg["eps"], cfg["seed"],
                                      cfg["N_max"], cfg["theta_max"], bound=cfg["bound"])
    hdr = ["trial", "eps", "lhs"] + [f"ratio_N{n}" for n in range(1, cfg["N_max"] + 1)]
    write_csv(os.path.join(cfg["out"], "trials.csv"), hdr, res["rows"])
    worst = ", ".join(f"N={n + 1}: {w:.4g}" for n, w in enumerate(res["worst"]))
    lines = [f"roots = {sorted(res['removal'].roots)}", f"worst ratio per N: {worst}",
             f"N_star = {res['N_star']}"]
    checks = [("bounded worst ratio at some N <= N_max", res["N_star"] is not None, str(res["N_star"]),
               f"finite N <= {cfg['N_max']}")]
    return lines, checks, None


def cmd_model_scaling(cfg):
    from . import model

    F = _nl(cfg)
    fit = model.scaling_fit(cfg["symbol"], F, cfg["eps"], cfg["lambdas"], cfg["n_paths"], cfg["order"],
                            cfg["seed"], workers=cfg["workers"])
    write_csv(os.path.join(cfg["out"], "moments.csv"), ["lambda", "moment", "stderr"],
              zip(fit.lams, fit.moments, fit.stderr))
    lo, hi = fit.ci()
    sym = model.symbol(cfg["symbol"])
    lines = [f"symbol {sym.tag}: homogeneity {sym.homogeneity:.4f}",
             f"fitted exponent = {fit.exponent:.6f} +- {fit.exponent_se:.2g} (95% CI [{lo:.4f}, {hi:.4f}])"]
    m = np.array(fit.moments)
    mono = bool(np.all(np.diff(m) < 2 * np.hypot(fit.stderr[1:], fit.stderr[:-1]))) if m.size > 1 else True
    if not mono:
        lines.append("diagnostic: moment curve is not monotone in lambda beyond noise")
    plot = (fit.lams, fit.moments, "lambda", "moment") if cfg["plot"] else None
    return lines, [], plot


def cmd_simulate(cfg):
    from . import sim
    from .field import TorusGrid
    from .nonlin import coupling_constant
    from .renorm import whole_line_sigma_sq

    F = _nl(cfg)
    eps = cfg["eps"]
    c = cfg["c_eps"]
    if c is None:
        c = coupling_constant(F, whole_line_sigma_sq()).a_hat / eps
    grid = TorusGrid.for_eps(eps, cfg["T"])
    conf = sim.SolverConfig(grid, eps, F, c, initial=cfg["initial"], record_every=cfg["record_every"])
    try:
        h = sim.integrate_growth(conf, cfg["seed"])
        blow = False
    except sim.BlowUpError as exc:
        h, blow = None, exc.step
    if h is not None:
        if cfg["format"] == "binary":
            sim.write_binary(os.path.join(cfg["out"], "field.bin"), h)
        else:
            h.to_csv(os.path.join(cfg["out"], "field.csv"))
    lines = [f"grid n_space={grid.n_space} dt={grid.dt:.6g} steps={grid.n_time}", f"C_eps = {c:.10g}",
             "noise: mollified white noise; drift -C_eps t included"]
    checks = [("no blow-up", not blow, f"step {blow}" if blow else "none", "none")]
    return lines, checks, None


def cmd_compare(cfg):
    from . import sim

    F = _nl(cfg)
    eps_list = sorted(cfg["eps"], reverse=True)
    rows = sim.coupled_convergence_experiment(F, eps_list, cfg["seeds"], cfg["T"], a=cfg["a"],
                                              record_every=cfg["record_every"], eta=cfg["eta"],
                                              workers=cfg["workers"])
    write_csv(os.path.join(cfg["out"], "errors.csv"),
              ["eps", "seed", "a", "sup_error", "holder_error", "drift_fit", "blowup_flag"],
              [(r.eps, r.seed, r.a, r.sup_error, r.holder_error, r.drift_fit, r.blowup_flag) for r in rows])
    lines = ["reference: Ito multiplicative heat equation on the same white noise; per-path linear drift removed"]
    checks = []
    plot = None
    for a in sorted({r.a for r in rows}):
        summ = sim.summarize(rows, a)
        med = [summ[e]["median_sup"] for e in eps_list]
        for e in eps_list:
            s = summ[e]
            lines.append(f"a={a:.10g} eps={e}: median sup error {s['median_sup']:.6g}, median C^eta error "
                         f"{s['median_holder']:.6g}, blow-up rate {s['blowup_rate']:.3g} (n={s['n']})")
        mono = all(m2 < m1 for m1, m2 in zip(med, med[1:]))
        checks.append((f"median sup error decreases in eps (a={a:.6g})", mono,
                       ", ".join(f"{m:.4g}" for m in med), "strictly decreasing"))
        if cfg["plot"] and plot is None:
            plot = (eps_list, med, "eps", "median sup error")
    return lines, checks, plot


COMMANDS = {
    "field-check": cmd_field_check, "coupling": cmd_coupling, "renorm": cmd_renorm,
    "wick-verify": cmd_wick_verify, "model-scaling": cmd_model_scaling, "simulate": cmd_simulate,
    "compare": cmd_compare,
}


def _plot_svg(path, data):
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    x, y, xl, yl = data
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.loglog(x, y, "o-")
    ax.set_xlabel(xl)
    ax.set_ylabel(yl)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="kpzlab", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, schema in SCHEMAS.items():
        sp = sub.add_parser(name, help=HELP[name].split("\n")[0], description=HELP[name],
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("config", nargs="?", help="JSON config file (flags override its keys)")
        for key in schema:
            if key == "F":
                sp.add_argument("--family", dest="F", help="nonlinearity: sqrt1pu2, gauss, poly:c0,c1,... or JSON")
            else:
                sp.add_argument("--" + key.replace("_", "-"), dest=key)
        sp.add_argument("--out", dest="out", help="output directory")
        sp.add_argument("--workers", dest="workers", help="worker threads (capped by KPZLAB_THREADS)")
        sp.add_argument("--plot", dest="plot", action="store_const", const=True, help="write an SVG plot")
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    cmd = args.command
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_cfg = {}
        if args.config:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
            if not isinstance(file_cfg, dict):
                raise ConfigError("config file must hold a JSON object")
            file_cfg.pop("command", None)
        cfg = resolve_config(cmd, file_cfg, flags)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"kpzlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(cfg["out"], exist_ok=True)
    echo = {k: v for k, v in cfg.items() if k not in ("out", "workers")}
    with open(os.path.join(cfg["out"], "config.json"), "w") as fh:
        json.dump({"command": cmd, **echo}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    from .field import NumericalError, ResolutionError
    from .renorm import ConsistencyError as RenormConsistency
    from .model import ConsistencyError as ModelConsistency

    try:
        lines, checks, plot = COMMANDS[cmd](cfg)
    except (NumericalError, RenormConsistency, ModelConsistency) as exc:
        emit_report(os.path.join(cfg["out"], "summary.txt"), cmd, [f"numerical consistency failure: {exc}"])
        print(f"kpzlab: numerical consistency failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, ResolutionError) as exc:
        print(f"kpzlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssertionError as exc:
        emit_report(os.path.join(cfg["out"], "summary.txt"), cmd, [f"assertion failure: {exc}"])
        print(f"kpzlab: assertion failure: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    emit_report(os.path.join(cfg["out"], "summary.txt"), cmd, lines, checks)
    if plot is not None:
        _plot_svg(os.path.join(cfg["out"], "plot.svg"), plot)
    for ln in lines:
        print(ln)
    failed = [c for c in checks if not c[1]]
    for name, ok, realized, required in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: realized {realized}, required {required}")
    return EXIT_ASSERT if failed else EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
