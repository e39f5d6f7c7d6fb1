"""``routed-attn`` command-line entry point."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .errors import RoutedAttnError
from .model import ModelState

log = logging.getLogger("routed_attn")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("seed", str(args.seed))
    if args.out is not None:
        cfg.set("out", args.out)
    cfg.validate()
    return cfg


def _checkpoint(out: Path) -> ModelState:
    return ModelState.load(out / "checkpoint")


def cmd_verify(cfg: RunConfig, args) -> int:
    from . import verify
    failures = verify.run(cfg, args.only)
    print(f"{'OK' if not failures else 'FAILED'}: {failures} failing properties")
    return 1 if failures else 0


def cmd_train(cfg: RunConfig, args) -> int:
    from .pipeline import run_train
    out = Path(cfg["out"])
    res = run_train(cfg, out)
    print(f"pretrain held-out CFM {res['pretrain_eval_initial']:.6f} -> "
          f"{res['pretrain_eval_final']:.6f}")
    st = res["state"]
    print(f"router parameters: {st.num_params('router')} of {st.num_params()} "
          f"({100 * st.num_params('router') / st.num_params():.2f}%)")
    print(f"checkpoint written to {out / 'checkpoint'}")
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    from .profiler import Dims, bench, write_bench_csv
    grid, tile, bucket = cfg.bench_geometry()
    dims = Dims(grid, cfg["bench.width"], cfg["bench.heads"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    sets = cfg["bench.branches"]
    if args.only:
        sets = tuple(s for s in sets if args.only in s) or ((args.only,),)
    for i, branch_set in enumerate(sets):
        recs = [bench(b, dims, cfg["bench.reps"], cfg["seed"], tile, bucket, cfg["bench.kernel"])
                for b in branch_set]
        path = out / f"bench_{i}.csv"
        write_bench_csv(path, recs)
        for r in recs:
            print(f"{r.branch:8s} L={r.L} d={r.d} median {r.median_s * 1e3:.2f} ms")
        print(f"wrote {path}")
    return 0


def cmd_route_dump(cfg: RunConfig, args) -> int:
    from .pipeline import route_dump
    from .router import write_gate_dump
    out = Path(cfg["out"])
    state = _checkpoint(out)
    recs = route_dump(state, cfg["profile.steps"])
    write_gate_dump(out / "gates.csv", recs)
    print(f"wrote {out / 'gates.csv'}")
    return 0


def cmd_profile(cfg: RunConfig, args) -> int:
    from .pipeline import route_dump, routed_mac_fraction
    from .profiler import (Dims, bench_routed_steps, export_gate_heatmap, recall_sweep,
                           runtime_breakdown)
    from .rng import Stream
    from .router import write_gate_dump
    out = Path(cfg["out"])
    state = _checkpoint(out)
    mc = state.config
    steps = cfg["profile.steps"]
    prof = out / "profile"
    prof.mkdir(parents=True, exist_ok=True)
    recs = route_dump(state, steps)
    write_gate_dump(prof / "gates.csv", recs)
    export_gate_heatmap(recs, prof / "heatmap.csv", cfg["profile.intervals"])
    curves = recall_sweep(state, cfg["profile.k"], steps, Stream(cfg["seed"], ("profile",)))
    (prof / "recall").mkdir(exist_ok=True)
    for k, curve in curves.items():
        curve.write_csv(prof / "recall" / f"step_{k:03d}.csv")
    frac, per_step = routed_mac_fraction(state, steps)
    dims = Dims(mc.grid, mc.width, mc.heads)
    rows = bench_routed_steps(recs, dims, mc.branch_geometry, cfg["profile.reps"], cfg["seed"])
    with open(prof / "step_latency.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    with open(prof / "breakdown.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["branch", "component", "median_s"])
        for br in ("full", "sliding", "coreset"):
            for comp, t in runtime_breakdown(br, dims, mc.branch_geometry,
                                             cfg["profile.reps"], cfg["seed"]).items():
                w.writerow([br, comp, repr(t)])
    print(f"routed attention MACs: {frac:.3f} of dense over {steps} steps")
    print(f"wrote profile artifacts to {prof}")
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    from .pipeline import sample_pair, save_samples
    out = Path(cfg["out"])
    state = _checkpoint(out)
    res = sample_pair(cfg, state)
    save_samples(out, res)
    print(f"mean squared deviation dense vs hard-routed: {res.msd:.6g}")
    return 0


COMMANDS = {
    "verify": cmd_verify, "train": cmd_train, "bench": cmd_bench,
    "profile": cmd_profile, "sample": cmd_sample, "route-dump": cmd_route_dump,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="routed-attn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", metavar="U64")
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--only", metavar="NAME")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RoutedAttnError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
