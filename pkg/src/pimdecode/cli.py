"""Command line entry points.

Subcommands: ``compile`` (emit stacks + manifest), ``verify`` (expansion
equivalence and budgets), ``simulate``, ``sweep``, ``reproduce <figure>``,
``gen-trace``. Exit codes: 0 success, 2 acceptance/verification failure,
1 input error. ``PIMDECODE_WORKERS`` sets the sweep worker pool size.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .compiler import (
    CompileError,
    PRESETS,
    compile_model,
    static_attention_stacks,
    weight_table_entries,
)
from .device import PimTopology, TimingParams
from .dispatcher import (
    CMD_BUFFER_BYTES,
    ConfigBuffer,
    Va2PaTable,
    expand,
    load_stacks,
)
from .harness import (
    FIGURES,
    HarnessConfig,
    MetricsReport,
    TraceSpec,
    emit_report,
    gen_trace,
    load_config,
    reproduce,
    resolve_trace,
    save_trace,
)
from .isa import OpKind, serialize, to_text
from .scheduler import SimError, render_gantt, simulate, sweep


def _write(out_dir: str, name: str, data: bytes) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "wb") as f:
        f.write(data)
    return path


def cmd_compile(args) -> int:
    cfg = load_config(args.config) if args.config else None
    model = cfg.model if cfg else PRESETS[args.model]
    topo = cfg.topo if cfg else PimTopology(nodes=args.nodes)
    tp = cfg.plan.tp if cfg else args.tp
    pp = cfg.plan.pp if cfg else args.pp
    program = compile_model(model, topo, tp=tp, pp=pp)
    out = args.out or "compiled"
    total = 0
    for st in program.stages:
        for (layer, kind), stack in sorted(st.stacks.items(), key=lambda kv: (kv[0][0], int(kv[0][1]))):
            blob = serialize(stack)
            total += len(blob)
            _write(out, f"stage{st.stage}_layer{layer}_{OpKind(kind).name.lower()}.stack", blob)
            if args.text:
                _write(
                    out,
                    f"stage{st.stage}_layer{layer}_{OpKind(kind).name.lower()}.txt",
                    to_text(stack).encode(),
                )
    manifest = program.manifest()
    _write(out, "manifest.json", (json.dumps(manifest, indent=2) + "\n").encode())
    per_stage = max(st.stack_bytes() for st in program.stages)
    print(f"compiled {model.name}: tp={tp} pp={pp} stages={pp}")
    print(f"stack bytes (largest stage): {per_stage} / {CMD_BUFFER_BYTES}")
    print(f"wrote {out}/manifest.json")
    return 0


def cmd_verify(args) -> int:
    """Expansion equivalence: dynamic stacks vs static unrolled reference."""
    model = PRESETS[args.model]
    topo = PimTopology(nodes=args.nodes)
    program = compile_model(model, topo, tp=args.tp, pp=args.pp)
    failures = 0
    checked = 0
    rng = np.random.default_rng(args.seed)
    for st in program.stages:
        geo = st.geo
        cfg = ConfigBuffer(total_layers=model.n_layers)
        image = load_stacks(st.stacks.values())
        for t_cur in (1, geo.tokens_per_row, geo.tokens_per_row + 1, 3 * geo.tokens_per_row + 7):
            t_cur = min(t_cur, model.max_ctl)
            units = geo.units_for(t_cur)
            table = Va2PaTable()
            for space, pas in weight_table_entries(st):
                table.extend(space, pas)
            base = st.weight_rows
            pas = []
            free = list(range(base, topo.rows_per_bank, geo.rows_per_unit))
            rng.shuffle(free)
            for r in range(units):
                pas.append(free[r])
            table.extend(1_000_000, pas)
            rid = 42
            cfg.slots.clear()
            cfg.add_request(rid, t_cur)
            for layer in range(st.layer_lo, st.layer_hi):
                ref = static_attention_stacks(program, st, layer, t_cur, table, 1_000_000)
                for kind in (OpKind.QKT, OpKind.SV):
                    dyn = expand(
                        st.stacks[(layer, kind)], cfg, table, request_id=rid,
                        space=1_000_000,
                    )
                    want = list(ref[kind].entries)
                    checked += 1
                    if dyn != want:
                        failures += 1
                        print(
                            f"MISMATCH stage {st.stage} layer {layer} {kind.name} t={t_cur}",
                            file=sys.stderr,
                        )
    print(f"expansion equivalence: {checked - failures}/{checked} stacks match")
    print(f"command buffer: {max(st.stack_bytes() for st in program.stages)} / {CMD_BUFFER_BYTES} bytes")
    return 0 if failures == 0 else 2


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    trace = resolve_trace(cfg)
    timeline, rep = simulate(
        trace, cfg.plan, cfg.model, cfg.topo, cfg.timing, cfg.features,
        record_timeline=args.timeline is not None or args.gantt,
    )
    report = MetricsReport(sim=rep, config_echo=cfg.echo())
    data = emit_report(report, args.format)
    if args.out:
        _write(os.path.dirname(args.out) or ".", os.path.basename(args.out), data)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(data.decode())
    if args.timeline:
        import csv as _csv

        with open(args.timeline, "w", newline="") as f:
            rows = timeline.to_rows()
            keys = sorted({k for r in rows for k in r})
            w = _csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)
        print(f"wrote {args.timeline}")
    if args.gantt:
        print(render_gantt(timeline))
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    trace = resolve_trace(cfg)
    grid = []
    for tok in args.grid.split(","):
        tp, pp = tok.lower().split("x")
        grid.append((int(tp), int(pp)))
    workers = int(os.environ.get("PIMDECODE_WORKERS", "1"))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(
                    sweep, trace, cfg.model, cfg.topo, cfg.timing, [point], cfg.features
                )
                for point in grid
            ]
            rows = [f.result()[0] for f in futures]
        feasible = [r for r in rows if r["feasible"]]
        if feasible:
            best = max(feasible, key=lambda r: r["tokens_per_sec"])
            for r in rows:
                r["best"] = r is best
    else:
        rows = sweep(trace, cfg.model, cfg.topo, cfg.timing, grid, cfg.features)
    data = emit_report({"sweep": rows}, args.format)
    sys.stdout.write(data.decode())
    return 0


def cmd_reproduce(args) -> int:
    result = reproduce(args.figure, **({"seed": args.seed} if args.seed is not None else {}))
    data = emit_report(result, args.format)
    if args.out:
        _write(os.path.dirname(args.out) or ".", os.path.basename(args.out), data)
    sys.stdout.write(data.decode())
    if not result["passed"]:
        print(f"{args.figure}: FAILED acceptance bound", file=sys.stderr)
        return 2
    print(f"{args.figure}: ok")
    return 0


def cmd_gen_trace(args) -> int:
    if args.preset:
        spec = TraceSpec.preset(args.preset, n_requests=args.n, seed=args.seed)
    else:
        spec = TraceSpec(
            mean=args.mean, std=args.std, min_len=args.min_len, max_len=args.max_len,
            n_requests=args.n, seed=args.seed,
        )
    requests = gen_trace(spec)
    save_trace(requests, args.out)
    lens = [r.input_len for r in requests]
    print(f"wrote {args.out}: n={len(requests)} mean={sum(lens)/len(lens):.0f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pimdecode", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    c = sub.add_parser("compile", help="emit command stacks and manifest")
    c.add_argument("--config")
    c.add_argument("--model", default="7b", choices=sorted(PRESETS))
    c.add_argument("--nodes", type=int, default=1)
    c.add_argument("--tp", type=int, default=1)
    c.add_argument("--pp", type=int, default=1)
    c.add_argument("--out", default="compiled")
    c.add_argument("--text", action="store_true", help="also write text form")
    c.set_defaults(fn=cmd_compile)

    v = sub.add_parser("verify", help="expansion-equivalence check")
    v.add_argument("--model", default="7b", choices=sorted(PRESETS))
    v.add_argument("--nodes", type=int, default=1)
    v.add_argument("--tp", type=int, default=1)
    v.add_argument("--pp", type=int, default=1)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_verify)

    s = sub.add_parser("simulate", help="run one decode simulation")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--format", default="json", choices=("json", "csv", "text"))
    s.add_argument("--timeline", help="write timeline CSV here")
    s.add_argument("--gantt", action="store_true")
    s.set_defaults(fn=cmd_simulate)

    w = sub.add_parser("sweep", help="sweep (tp,pp) candidates")
    w.add_argument("--config", required=True)
    w.add_argument("--grid", required=True, help="e.g. 32x1,16x2,8x4")
    w.add_argument("--format", default="json", choices=("json", "csv", "text"))
    w.set_defaults(fn=cmd_sweep)

    r = sub.add_parser("reproduce", help="run a scripted experiment")
    r.add_argument("figure", choices=FIGURES)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--format", default="json", choices=("json", "csv", "text"))
    r.set_defaults(fn=cmd_reproduce)

    g = sub.add_parser("gen-trace", help="generate a synthetic trace CSV")
    g.add_argument("--preset", choices=("qmsum", "hotpotqa", "musique"))
    g.add_argument("--mean", type=float, default=13966)
    g.add_argument("--std", type=float, default=6182)
    g.add_argument("--min-len", type=int, default=2651)
    g.add_argument("--max-len", type=int, default=30456)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (SimError, CompileError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
