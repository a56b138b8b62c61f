"""One test per acceptance criterion, at the stated sizes and tolerances."""

import math
import time

import numpy as np

from kpzlab import cli, field, model, nonlin, renorm, sim, wick
from kpzlab.nonlin import make_nonlinearity, poly
from kpzlab.wick import TypeSpace

U2 = poly(0, 0, 1)
U4 = poly(0, 0, 1, 0, 0.1)
SQRT = make_nonlinearity({"family": "sqrt1pu2"})


def test_c1_kernel_identity(report):
    t0 = time.time()
    t, x = field.kernel_identity_grid()
    _, _, err = field.kernel_identity_check(t, x)
    dt = time.time() - t0
    ok = err.max() < 1e-4 and dt < 10
    report(1, ok, f"max rel err {err.max():.2e} (< 1e-4) over {t.size} displacements, {dt:.1f}s (< 10s)")


def test_c2_correlation_sandwich_and_samples(report):
    t0 = time.time()
    lams, zmax, ok_s = [], [], True
    for eps in (0.02, 0.05, 0.1):
        corr = field.CorrelationFn(eps)
        lams.append(corr.sandwich_lambda(*field.sandwich_grid(eps))[0])
        rows, ok = field.sample_correlation_check(eps, n_paths=500, n_disp=10, seed=0)
        zmax.append(float(max(abs(r[5]) for r in rows)))
        ok_s &= ok
    dt = time.time() - t0
    lam = max(lams)
    ok = lam <= 10 and ok_s and dt < 120
    report(2, ok, f"Lambda {lam:.3f} (<= 10); sampled max |z| per eps {[round(z, 2) for z in zmax]} (<= 3); "
                  f"{dt:.0f}s (< 120s)")


def test_c3_coupling_constant(report):
    t0 = time.time()
    s2 = renorm.whole_line_sigma_sq()
    worst = max(abs(nonlin.coupling_constant(poly(0, 0, 1, 0, lam), s2).a - (1 + 6 * lam * s2))
                for lam in (-0.2, 0.05, 0.1, 0.5, 2.0))
    a = nonlin.coupling_constant(SQRT, s2).a
    a_mc, se, _, _ = nonlin.coupling_constant_mc(SQRT, s2, n=10_000_000, seed=0)
    z = (a - a_mc) / se
    dt = time.time() - t0
    ok = worst < 1e-8 and abs(z) <= 3 and dt < 60
    report(3, ok, f"quartic |a - (1 + 6 lam s2)| max {worst:.1e} (< 1e-8); sqrt a={a:.10f} vs MC {a_mc:.6f} "
                  f"+- {se:.1e}, z={z:.2f} (|z| <= 3); {dt:.0f}s")


def test_c4_wick_oracles(report):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(1, 7))
        pts = wick.cone_points(n, rng)
        cov = wick.covariance_matrix(pts, (0.02, 0.05, 0.1)[i % 3])
        th = rng.uniform(0.0, 1.0, n)
        kinds = [str(k) for k in rng.choice(["sin", "cos"], n)]
        cen = list(rng.random(n) < 0.5)
        a = wick.trig_expectation(cov, kinds, th, cen)
        b = wick.chaos_series_expectation(cov, kinds, th, cen, order=8)
        worst = max(worst, abs(a - b))
    counts = [wick.count_pairings([1] * (2 * n)) for n in range(1, 7)]
    want = [math.prod(range(1, 2 * n, 2)) for n in range(1, 7)]
    dt = time.time() - t0
    ok = worst < 1e-8 and counts == want and dt < 60
    report(4, ok, f"trig vs order-8 chaos series max |diff| {worst:.1e} (< 1e-8, theta <= 1); pairing counts "
                  f"{counts}; {dt:.0f}s")


def test_c5_special_bound(report):
    t0 = time.time()
    spaces = [TypeSpace.make(o, n - o) for n in range(1, 5) for o in range(n + 1)]
    res = wick.special_bound_ensemble(spaces, 1000, [0.1, 0.05, 0.02, 0.01], seed=0, theta_max=10.0)
    w = res["worst"]
    halving = [w[0.1] / w[0.05], w[0.02] / w[0.01]]
    dt = time.time() - t0
    ok = all(np.isfinite(v) for v in w.values()) and all(0.5 < h < 2.0 for h in halving) and dt < 300
    report(5, ok, f"worst ratio per eps {({e: round(v, 4) for e, v in w.items()})}; halving factors "
                  f"{[round(h, 3) for h in halving]} (within 2x); {dt:.0f}s")


def test_c6_general_bound(report):
    t0 = time.time()
    eps = [0.02, 0.05, 0.1]
    r2 = wick.general_bound_ensemble(TypeSpace.make(1, 1), 2, [(0, 0)], 500, eps, seed=0, N_max=6)
    # N <= 4 keeps the |T| = 3 moment tensors within budget; the bound is already met at N = 1
    r3 = wick.general_bound_ensemble(TypeSpace.make(1, 2), 2, [(0, 0, 0)], 500, eps, seed=1, N_max=4)
    rng = np.random.default_rng(6)
    orth = 0.0
    for space, M in ((TypeSpace.make(1, 1), [(1, 0), (0, 1)]),
                     (TypeSpace.make(1, 2), [(1, 0, 0), (0, 1, 0), (0, 0, 1)]),
                     (TypeSpace.make(0, 2), [(0, 0)])):
        for _ in range(20):
            cov = wick.covariance_matrix(wick.cone_points(len(space), rng), 0.05)
            th = rng.uniform(0, 10, len(space))
            orth = max(orth, max(abs(wick.truncate_T_M(cov, space, th, M, m)) for m in M))
    defect = 0.0
    sp = TypeSpace.make(1, 1)
    for _ in range(10):
        cov = wick.covariance_matrix(wick.cone_points(4, rng), 0.05)
        th = rng.uniform(0, 3, 2)
        for S in ((), (0,), (1,)):
            for probe in ([0, 0, 0, 0], [1, 0, 0, 1], [0, 2, 1, 0]):
                defect = max(defect, wick.product_expansion_identity(cov, sp, 2, [(1, 0)], th, probe, S)[0])
    dt = time.time() - t0
    ok = (r2["N_star"] is not None and r3["N_star"] is not None and orth < 1e-12 and defect < 1e-10
          and dt < 600)
    report(6, ok, f"|T|=2 N*={r2['N_star']} worst {r2['worst'][r2['N_star'] - 1]:.3g}; |T|=3 N*={r3['N_star']} "
                  f"worst {r3['worst'][r3['N_star'] - 1]:.3g}; orthogonality {orth:.1e} (< 1e-12); "
                  f"expansion defect {defect:.1e} (< 1e-10); {dt:.0f}s")


def test_c7_log_cancellation(report):
    t0 = time.time()
    rep = renorm.log_cancellation_check(U4, [0.02, 0.04, 0.08, 0.16], n_samples=2_000_000, seed=0)
    dt = time.time() - t0
    s220, s211, sc = rep["slope_c220"], rep["slope_c211"], rep["slope_combined"]
    ok = rep["divergent"] and rep["cancels"] and rep["c220p_bounded"] and dt < 1800
    report(7, ok, f"slopes c220 {s220[0]:.4f}+-{s220[1]:.4f}, c211 {s211[0]:.4f}+-{s211[1]:.4f} "
                  f"(|slope| > 5 se: {rep['divergent']}); c220+4c211 {sc[0]:.4f}+-{sc[1]:.4f} "
                  f"(within 2 se of 0: {rep['cancels']}); c220p spread {rep['c220p_spread']:.3f} (< 0.1); {dt:.0f}s")


def test_c8_model_scaling(report):
    t0 = time.time()
    f1 = model.scaling_fit("oneP", U4, 0.02, [0.05, 0.1, 0.2, 0.4], 500, seed=0)
    f2 = model.scaling_fit("twoP", U4, 0.02, [0.05, 0.1, 0.2, 0.4], 500, seed=1)
    m, se = model.centring_check("twoP", U4, 0.02, n_paths=500, lam=0.2, seed=2)
    dt = time.time() - t0
    ok = (abs(f1.exponent + 0.5) <= 0.1 and abs(f2.exponent + 1.0) <= 0.15 and abs(m) <= 3 * se and dt < 1200)
    report(8, ok, f"<1'> exponent {f1.exponent:.4f}+-{f1.exponent_se:.4f} (-0.5 +- 0.1); <2'> exponent "
                  f"{f2.exponent:.4f}+-{f2.exponent_se:.4f} (-1.0 +- 0.15); E<2',phi> = {m:.4f} +- {se:.4f} "
                  f"(within 3 se of 0); {dt:.0f}s")


def test_c9_coupled_convergence(report):
    t0 = time.time()
    eps = [0.1, 0.05, 0.025]
    seeds = range(50)
    s2 = renorm.whole_line_sigma_sq()
    a4 = 1 + 0.6 * s2
    meds, mono = {}, {}
    for name, F, a in (("u^2", U2, None), ("u^2+0.1u^4", U4, [1.0, a4]), ("sqrt(1+u^2)", SQRT, None)):
        rows = sim.coupled_convergence_experiment(F, eps, seeds, T=0.25, a=a)
        a_used = a4 if a else nonlin.coupling_constant(F, s2).a
        summ = sim.summarize(rows, a_used)
        med = [summ[e]["median_sup"] for e in eps]
        meds[name] = med
        mono[name] = all(m2 < m1 for m1, m2 in zip(med, med[1:]))
        if a:
            naive = sim.summarize(rows, 1.0)[0.025]["median_sup"]
    dt = time.time() - t0
    sep = naive > meds["u^2+0.1u^4"][-1]
    ok = all(mono.values()) and sep
    med_s = "; ".join(f"{k} {[round(m, 4) for m in v]}" for k, v in meds.items())
    report(9, ok, f"median sup errors at eps {eps}: {med_s} (monotone: {all(mono.values())}); at eps=0.025 "
                  f"naive a=1 gives {naive:.5f} vs a={a4:.5f} gives {meds['u^2+0.1u^4'][-1]:.5f} "
                  f"(naive larger: {sep}); {dt:.0f}s")


def _pipelines():
    return [
        ["field-check", "--eps", "0.1", "--seed", "0", "--n-paths", "20"],
        ["coupling", "--family", "sqrt1pu2", "--n-mc", "200000"],
        ["renorm", "--family", "poly:0,0,1,0,0.1", "--eps", "0.08", "--seed", "0", "--n-samples", "30000"],
        ["wick-verify", "--seed", "0", "--removal", "[[0,0]]", "--n-configs", "8", "--N-max", "3"],
        ["model-scaling", "--symbol", "oneP", "--family", "poly:0,0,1,0,0.1", "--eps", "0.1", "--seed", "0",
         "--lambdas", "0.1,0.2,0.4,0.8", "--n-paths", "200"],
        ["simulate", "--family", "sqrt1pu2", "--eps", "0.1", "--seed", "3", "--T", "0.01"],
        ["compare", "--family", "poly:0,0,1,0,0.1", "--eps", "0.2,0.1", "--seeds", "0:3", "--T", "0.02",
         "--a", "1.0,1.1"],
    ]


def test_c10_determinism(report, tmp_path, monkeypatch):
    monkeypatch.setenv("KPZLAB_THREADS", "8")
    bad = []
    n_files = 0
    for argv in _pipelines():
        outs = {}
        for w in (1, 4, 8):
            out = tmp_path / f"{argv[0]}-{w}"
            cli.run([*argv, "--workers", str(w), "--out", str(out)])
            outs[w] = {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}
        if not outs[1]:
            bad.append(f"{argv[0]}: no CSV")
        n_files += len(outs[1])
        for w in (4, 8):
            if outs[w] != outs[1]:
                bad.append(f"{argv[0]} workers={w}")
    report(10, not bad, f"{n_files} CSVs from {len(_pipelines())} pipelines byte-identical across 1/4/8 workers"
                        + (f"; mismatches {bad}" if bad else ""))
