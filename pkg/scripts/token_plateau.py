"""Per-minute coarse-context tokens for every mode on one synthetic trace.

    python3 scripts/token_plateau.py --minutes 60 --out plateau.csv
"""
import argparse
import csv
import sys

from eventmem import EngineConfig, MockBackend, RunMode
from eventmem.harness import generate_synthetic, run_trace
from eventmem.harness.synthetic import PROBE_QUESTION
from eventmem.orchestrator import coarse_token_bound


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--minutes", type=float, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="CSV path (default: stdout)")
    args = ap.parse_args()

    cfg = EngineConfig()
    events = generate_synthetic(args.seed, args.minutes, embed_dim=cfg.embed_dim)
    modes = list(RunMode)
    reports = {m: run_trace(events, cfg, m, MockBackend(cfg.embed_dim)) for m in modes}
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh)
    w.writerow(["minute"] + [m.value for m in modes])
    probes = reports[modes[0]].events
    for i, ev in enumerate(probes):
        w.writerow([ev.ts / 60] + [reports[m].queries[i].coarse_budget.total for m in modes])
    if args.out:
        fh.close()
    print(f"bound B = {coarse_token_bound(cfg, PROBE_QUESTION, '!answer:activity in the classroom')}",
          file=sys.stderr)


if __name__ == "__main__":
    main()
