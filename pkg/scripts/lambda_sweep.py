"""Sweep the merge level penalty and the root cap.

For each (lambda, n_r) it reports needle recall, the deepest root and the
mean coarse tokens over a set of synthetic traces.

    python3 scripts/lambda_sweep.py --lambdas 0,0.1,0.5,1.0 --roots 2,4,8
"""
import argparse

from eventmem import EngineConfig, MockBackend, RunMode, StreamEngine
from eventmem.harness import generate_synthetic, run_trace


def floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",")]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lambdas", type=floats, default=[0.0, 0.1, 0.5, 1.0])
    ap.add_argument("--roots", type=floats, default=[2, 4, 8])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--minutes", type=int, default=30)
    args = ap.parse_args()

    print("lambda  n_r  recall  max_root_level  mean_coarse_tokens")
    for lam in args.lambdas:
        for n_r in map(int, args.roots):
            cfg = EngineConfig(lam=lam, n_r=n_r)
            hits, depth, tokens = [], 0, []
            for seed in range(args.seeds):
                events = generate_synthetic(seed, args.minutes, f"{1 + seed % (args.minutes - 4)}.5@{args.minutes}",
                                            embed_dim=cfg.embed_dim)
                engine = StreamEngine(cfg, MockBackend(cfg.embed_dim), RunMode.HIERARCHICAL)
                report = run_trace(events, cfg, RunMode.HIERARCHICAL, engine.backend, engine=engine)
                hits.extend(report.hits())
                depth = max(depth, max(n.level for n in engine.forest.root_nodes()))
                tokens.extend(q.coarse_budget.total for q in report.queries)
            print(f"{lam:6.2f} {n_r:4d} {sum(hits) / len(hits):7.3f} {depth:15d} {sum(tokens) / len(tokens):19.0f}")


if __name__ == "__main__":
    main()
