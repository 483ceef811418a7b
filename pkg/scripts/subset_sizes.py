"""Print per-class counts and totals of the imbalanced subsets for a few p."""

import argparse

from imbssl.dataset import ImbalanceSpec, imbalanced_counts, rescaled_counts


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--per-class", type=int, default=5000)
    p.add_argument("-p", type=float, nargs="+", default=[10.0, 100.0])
    args = p.parse_args()
    for factor in args.p:
        counts = imbalanced_counts(args.per_class, ImbalanceSpec(factor))
        total = sum(counts)
        print(f"p={factor:g}: total {total}  per-class {counts}")
        print(f"  balanced rescale to {total}: {rescaled_counts(total, len(counts))}")


if __name__ == "__main__":
    main()
