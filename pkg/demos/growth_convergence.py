"""Sup distance between the rescaled growth model and KPZ as eps shrinks."""

from kpzlab import nonlin, renorm, sim
from kpzlab.nonlin import poly


def main():
    F = poly(0, 0, 1, 0, 0.1)
    a = nonlin.coupling_constant(F, renorm.whole_line_sigma_sq()).a
    eps = [0.1, 0.05]
    rows = sim.coupled_convergence_experiment(F, eps, range(4), T=0.05, a=[1.0, a])
    for lab, aa in (("naive a=1", 1.0), (f"a={a:.4f}", a)):
        summ = sim.summarize(rows, aa)
        print(lab, {e: round(summ[e]["median_sup"], 5) for e in eps})


if __name__ == "__main__":
    main()
