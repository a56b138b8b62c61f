"""Effective coupling a and renormalisation constants for a few nonlinearities."""

from kpzlab import nonlin, renorm
from kpzlab.nonlin import make_nonlinearity

FAMILIES = ["poly:0,0,1", "poly:0,0,1,0,0.1", "sqrt1pu2", "gauss"]


def main():
    s2 = renorm.whole_line_sigma_sq()
    print(f"sigma^2 = {s2:.9f}")
    for spec in FAMILIES:
        fam, _, args = spec.partition(":")
        cfg = {"family": fam}
        if args:
            cfg["coeffs"] = [float(c) for c in args.split(",")]
        F = make_nonlinearity(cfg)
        a = nonlin.coupling_constant(F, s2).a
        rc = renorm.compute_constants(F, 0.05, n_samples=200_000, seed=0)
        print(f"{spec:20s} a = {a:.6f}  C_eps(0.05) = {rc.c_eps:.4f}")


if __name__ == "__main__":
    main()
