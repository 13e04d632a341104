"""Run one experiment spec file, with optional key=value overrides.

    python3 scripts/run_experiment.py scripts/specs/compare.cfg seeds=0 train.max_epochs=10
"""
import argparse
import logging

from gazfusion.harness import load_spec, run_experiment
from gazfusion.kvconfig import parse_overrides


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("spec", help="experiment spec file")
    parser.add_argument("overrides", nargs="*", help="key=value overrides")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s")
    spec = load_spec(args.spec, parse_overrides(args.overrides))
    result = run_experiment(spec)
    print(result if isinstance(result, str) else result.table)


if __name__ == "__main__":
    main()
