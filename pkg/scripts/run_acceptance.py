"""Run the full-scale simulation studies used by tests/test_acceptance.py.

Results land in results/<name>/ and are reused by the acceptance tests as long
as the config hash and package version match. On one core the whole set takes
several hours; use --workers on larger machines.

    python3 scripts/run_acceptance.py --workers 4 [--only table1 table2]
"""

import argparse
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from spatial_iv.harness import cached_run  # noqa: E402
from acceptance_jobs import JOBS  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--only", nargs="*", default=None)
    args = ap.parse_args()
    for job in JOBS:
        if args.only and job.name not in args.only:
            continue
        t0 = time.time()
        print(f"[{job.name}] {job.config} cells={job.cells or 'all'}", flush=True)

        def progress(done, total):
            if done % max(1, total // 50) == 0 or done == total:
                print(f"  {job.name}: {done}/{total}  {time.time() - t0:.0f}s", flush=True)

        man = cached_run(ROOT / job.config, ROOT / job.out, only_cells=job.cells,
                         workers=args.workers, progress=progress)
        for c in man["cells"]:
            print(f"  {c['name']}: {c['status']} {c['completed']}/{c['replicates']}", flush=True)


if __name__ == "__main__":
    main()
