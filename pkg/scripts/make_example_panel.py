"""Write a simulated panel CSV to try ``drcee estimate`` on.

    python scripts/make_example_panel.py runs/example_panel.csv --n 150
"""

import argparse
from pathlib import Path

from drcee.data import write_csv
from drcee.simulation import PATTERNS, SimScenario, generate_panel


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--n", type=int, default=150)
    ap.add_argument("--T", type=int, default=20)
    ap.add_argument("--pattern-e", default="linear", choices=PATTERNS)
    ap.add_argument("--pattern-mu0", default="linear", choices=PATTERNS)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    sc = SimScenario(pattern_e=args.pattern_e, pattern_mu0=args.pattern_mu0, n=args.n, T=args.T, seed=args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(generate_panel(sc, 0).panel, args.out)
    print(f"wrote {args.out} ({args.n} individuals x {args.T} decision points)")


if __name__ == "__main__":
    main()
