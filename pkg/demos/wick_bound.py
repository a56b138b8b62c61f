"""Random-configuration check of the trigonometric Wick bound with the mean removed."""

from kpzlab import wick
from kpzlab.wick import TypeSpace


def main():
    res = wick.general_bound_ensemble(TypeSpace.make(1, 1), 2, [(0, 0)], 40, [0.05, 0.1], seed=0, N_max=4)
    print("first N meeting the bound:", res["N_star"])
    print("worst ratio per N:", [round(float(w), 3) for w in res["worst"]])


if __name__ == "__main__":
    main()
