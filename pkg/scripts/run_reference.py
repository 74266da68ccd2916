#!/usr/bin/env python3
"""Build (or reuse) the seed-0 reference run under runs/reference.

Usage: python scripts/run_reference.py [--root DIR] [--force]
"""

import argparse
import json
import shutil
import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default=str(REPO_ROOT / "runs" / "reference"))
    parser.add_argument("--force", action="store_true",
                        help="discard any cached run and retrain")
    args = parser.parse_args()

    from oodinv.reference import load_or_run_reference

    root = Path(args.root)
    if args.force and root.exists():
        shutil.rmtree(root)
    artifacts = load_or_run_reference(root, quiet=False)
    print(json.dumps({k: v for k, v in artifacts.summary.items()
                      if k in ("a1", "a2", "b", "overfit", "eval", "editing",
                               "wall_seconds")},
                     sort_keys=True, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
