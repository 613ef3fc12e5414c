"""Needle recall@k_f across seeds for the retrieving modes.

    python3 scripts/needle_vs_naive.py --seeds 100 --k-f 2
"""
import argparse
import random

from eventmem import EngineConfig, MockBackend, RunMode
from eventmem.harness import generate_synthetic, run_trace


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--k-f", type=int, default=2)
    ap.add_argument("--n-r", type=int, default=4)
    ap.add_argument("--needles", type=int, default=1, help="needles per trace")
    args = ap.parse_args()

    cfg = EngineConfig(k_f=args.k_f, n_r=args.n_r)
    modes = [m for m in RunMode if m.retrieves]
    hits = {m: [] for m in modes}
    for seed in range(args.seeds):
        rng = random.Random(seed)
        minutes = rng.randint(8 + 2 * args.needles, 30)
        at = sorted(rng.sample(range(1, minutes - 3), args.needles))
        spec = ",".join(f"{a}.5@{minutes}" for a in at)
        events = generate_synthetic(seed, minutes, spec, embed_dim=cfg.embed_dim, probe_every=0)
        for m in modes:
            hits[m].extend(run_trace(events, cfg, m, MockBackend(cfg.embed_dim)).hits())
    for m in modes:
        print(f"{m.value:15s} recall@{cfg.k_f} = {sum(hits[m]) / len(hits[m]):.3f}  ({len(hits[m])} needles)")


if __name__ == "__main__":
    main()
