"""Workload traces, configuration, report emission, reproduction scripts.

Synthetic traces draw input context lengths from a truncated normal whose
location parameter is calibrated so the truncated distribution's mean equals
the preset mean (plain truncation would bias Musique by more than 3%).
Output lengths are a separate, configurable model: the benchmark statistics
only characterize inputs.

``reproduce`` runs a named desk-scale experiment and checks its acceptance
bound, returning a machine-readable verdict; the CLI maps a failed bound to
exit code 2 with an expected-vs-observed diff.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, stats

from .compiler import ModelConfig, PRESETS, compile_model, model_config
from .partition import FcOp, Strategy
from .device import PimTopology, TimingParams
from .isa import OpKind
from .memmgr import Policy, avg_batch_size
from .scheduler import (
    Features,
    OpCostModel,
    ParallelismPlan,
    Request,
    SimReport,
    simulate,
    sweep,
)


class TraceError(ValueError):
    pass


# input context statistics: mean, std, min, max (tokens)
TRACE_PRESETS: Dict[str, Tuple[int, int, int, int]] = {
    "qmsum": (13966, 6182, 2651, 30456),
    "hotpotqa": (13465, 3921, 1917, 17674),
    "musique": (16362, 1651, 6820, 17917),
}


@dataclass(frozen=True)
class TraceSpec:
    source: str = "synth"  # "synth" | "csv"
    mean: float = 13966
    std: float = 6182
    min_len: int = 2651
    max_len: int = 30456
    n_requests: int = 100
    out_len_model: Tuple = ("uniform", 64, 512)
    seed: int = 0
    path: str = ""

    def __post_init__(self):
        if self.source == "synth":
            if not (self.min_len <= self.mean <= self.max_len):
                raise TraceError("need min <= mean <= max")
            if self.std < 0:
                raise TraceError("std must be >= 0")
            if self.n_requests < 1:
                raise TraceError("n_requests must be >= 1")

    @staticmethod
    def preset(name: str, n_requests: int, seed: int = 0, out_len_model=("uniform", 64, 512)):
        if name not in TRACE_PRESETS:
            raise TraceError(f"unknown trace preset {name!r}")
        mean, std, lo, hi = TRACE_PRESETS[name]
        return TraceSpec(
            mean=mean,
            std=std,
            min_len=lo,
            max_len=hi,
            n_requests=n_requests,
            seed=seed,
            out_len_model=out_len_model,
        )

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "mean": self.mean,
            "std": self.std,
            "min_len": self.min_len,
            "max_len": self.max_len,
            "n_requests": self.n_requests,
            "out_len_model": list(self.out_len_model),
            "seed": self.seed,
            "path": self.path,
        }


def _calibrated_loc(mean: float, std: float, lo: float, hi: float) -> float:
    """Location such that the [lo, hi]-truncated normal has the target mean."""
    if std == 0:
        return mean

    def trunc_mean(loc: float) -> float:
        a, b = (lo - loc) / std, (hi - loc) / std
        return stats.truncnorm.mean(a, b, loc=loc, scale=std)

    span = hi - lo
    return float(
        optimize.brentq(lambda m: trunc_mean(m) - mean, lo - 2 * span, hi + 2 * span)
    )


def gen_trace(spec: TraceSpec) -> List[Request]:
    """Sample a reproducible request trace from the spec."""
    if spec.source != "synth":
        raise TraceError("gen_trace needs a synthetic spec")
    rng = np.random.default_rng(spec.seed)
    if spec.std == 0:
        lens = np.full(spec.n_requests, int(round(spec.mean)), dtype=np.int64)
    else:
        loc = _calibrated_loc(spec.mean, spec.std, spec.min_len, spec.max_len)
        a = (spec.min_len - loc) / spec.std
        b = (spec.max_len - loc) / spec.std
        lens = stats.truncnorm.rvs(
            a, b, loc=loc, scale=spec.std, size=spec.n_requests, random_state=rng
        )
        lens = np.clip(np.rint(lens), spec.min_len, spec.max_len).astype(np.int64)
    kind = spec.out_len_model[0]
    if kind == "fixed":
        outs = np.full(spec.n_requests, int(spec.out_len_model[1]), dtype=np.int64)
    elif kind == "uniform":
        lo, hi = int(spec.out_len_model[1]), int(spec.out_len_model[2])
        outs = rng.integers(lo, hi + 1, size=spec.n_requests)
    else:
        raise TraceError(f"unknown out_len model {kind!r}")
    return [
        Request(id=i, input_len=int(lens[i]), out_len=int(outs[i]))
        for i in range(spec.n_requests)
    ]


def save_trace(requests: Sequence[Request], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "input_len", "out_len"])
        for r in requests:
            w.writerow([r.id, r.input_len, r.out_len])


def load_trace(path: str) -> List[Request]:
    """Parse a trace CSV; malformed rows are reported with their line number."""
    out: List[Request] = []
    seen = set()
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"id", "input_len", "out_len"} <= set(
            reader.fieldnames
        ):
            raise TraceError("trace CSV needs columns id,input_len,out_len")
        for lineno, row in enumerate(reader, start=2):
            try:
                rid = int(row["id"])
                ilen = int(row["input_len"])
                olen = int(row["out_len"])
            except (TypeError, ValueError):
                raise TraceError(f"line {lineno}: malformed row {row!r}") from None
            if ilen < 1 or olen < 1:
                raise TraceError(f"line {lineno}: non-positive length")
            if rid in seen:
                raise TraceError(f"line {lineno}: duplicate id {rid}")
            seen.add(rid)
            out.append(Request(id=rid, input_len=ilen, out_len=olen))
    return out


# ---------------------------------------------------------------------------
# Configuration file
# ---------------------------------------------------------------------------


@dataclass
class HarnessConfig:
    model: ModelConfig
    topo: PimTopology
    timing: TimingParams
    plan: ParallelismPlan
    features: Features
    trace: TraceSpec

    def echo(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "topology": asdict(self.topo),
            "timing": asdict(self.timing),
            "plan": {
                "tp": self.plan.tp,
                "pp": self.plan.pp,
                "micro_batch": self.plan.micro_batch,
            },
            "features": self.features.to_dict(),
            "trace": self.trace.to_dict(),
        }


def load_config(path_or_dict) -> HarnessConfig:
    if isinstance(path_or_dict, (str, os.PathLike)):
        with open(path_or_dict) as f:
            doc = json.load(f)
    else:
        doc = dict(path_or_dict)
    model = model_config(doc.get("model", "7b"))
    topo = PimTopology(**doc.get("topology", {}))
    timing = TimingParams(**doc.get("timing", {}))
    p = doc.get("plan", {})
    plan = ParallelismPlan(
        tp=p.get("tp", 1), pp=p.get("pp", 1), micro_batch=p.get("micro_batch")
    )
    features = Features(**doc.get("features", {}))
    tr = doc.get("trace", {})
    if isinstance(tr, str):
        trace = TraceSpec.preset(tr, n_requests=100)
    elif tr.get("source", "synth") == "csv":
        trace = TraceSpec(source="csv", path=tr["path"])
    else:
        tr = dict(tr)
        preset = tr.pop("preset", None)
        if preset:
            mean, std, lo, hi = TRACE_PRESETS[preset]
            tr.setdefault("mean", mean)
            tr.setdefault("std", std)
            tr.setdefault("min_len", lo)
            tr.setdefault("max_len", hi)
        if "out_len_model" in tr:
            tr["out_len_model"] = tuple(tr["out_len_model"])
        trace = TraceSpec(**tr)
    return HarnessConfig(model, topo, timing, plan, features, trace)


def resolve_trace(cfg: HarnessConfig) -> List[Request]:
    if cfg.trace.source == "csv":
        return load_trace(cfg.trace.path)
    return gen_trace(cfg.trace)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    sim: SimReport
    config_echo: dict

    def to_dict(self) -> dict:
        d = self.sim.to_dict()
        d["config"] = self.config_echo
        return d


def _round_floats(obj, ndigits=6):
    if isinstance(obj, float):
        return round(obj, ndigits)
    if isinstance(obj, dict):
        return {k: _round_floats(v, ndigits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, ndigits) for v in obj]
    return obj


def emit_report(report, fmt: str = "json") -> bytes:
    """Render a report dict (or MetricsReport) as JSON, CSV, or text."""
    if isinstance(report, MetricsReport):
        doc = report.to_dict()
    elif isinstance(report, SimReport):
        doc = report.to_dict()
    else:
        doc = dict(report)
    doc = _round_floats(doc)
    fmt = fmt.lower()
    if fmt == "json":
        return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["key", "value"])
        flat = _flatten(doc)
        for k in sorted(flat):
            w.writerow([k, flat[k]])
        return buf.getvalue().encode()
    if fmt == "text":
        return _text_report(doc).encode()
    raise ValueError(f"unknown format {fmt!r}")


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _text_report(doc: dict) -> str:
    lines = []
    for k in ("tokens_per_sec", "utilization_pct", "avg_batch", "total_tokens",
              "wall_cycles", "iterations"):
        if k in doc:
            v = doc[k]
            lines.append(f"{k:<18} {v:,.2f}" if isinstance(v, float) else f"{k:<18} {v:,}")
    bd = doc.get("latency_breakdown") or {}
    if bd:
        lines.append("")
        lines.append("latency breakdown (per op, % of op cycles)")
        for op in sorted(bd):
            phases = bd[op]
            total = sum(phases.values())
            if total <= 0:
                continue
            segs = []
            for phase in ("DT-GB", "MAC", "DT-Out", "EPU"):
                if phase in phases:
                    pct = 100.0 * phases[phase] / total
                    segs.append(f"{phase} {pct:5.1f}% {'#' * int(round(pct / 4))}")
            lines.append(f"  {op:<9} " + " | ".join(segs))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Figure reproduction
# ---------------------------------------------------------------------------

FIGURES = ("BATCH_GROWTH", "LATENCY_BD", "TPP_SWEEP", "UTIL_SCALING", "PINGPONG")

PINGPONG_BANDS = {
    "QKT": (30.0, 50.0),
    "SV": (34.0, 54.0),
    "FFN1": (19.0, 39.0),
    "FFN2": (18.0, 38.0),
}


def _op_latency_profile(
    model_name: str = "7b",
    tp: int = 8,
    t_cur: int = 16384,
    topo: Optional[PimTopology] = None,
    timing: Optional[TimingParams] = None,
) -> Dict[str, Dict[str, dict]]:
    """Serial and double-buffered per-op costs at a fixed context length."""
    topo = topo or PimTopology(nodes=1)
    timing = timing or TimingParams()
    program = compile_model(model_name, topo, tp=tp, pp=1)
    out: Dict[str, Dict[str, dict]] = {}
    for mode in ("serial", "pingpong"):
        costs = OpCostModel(program, timing, pingpong=(mode == "pingpong"))
        units = program.stages[0].geo.units_for(t_cur)
        qkt, sv = costs.attention(0, units)
        fc = costs.fc(0)
        out[mode] = {
            "QKT": qkt,
            "SV": sv,
            "FFN1": fc[FcOp.FFN1],
            "FFN2": fc[FcOp.FFN2],
            "QKV_GEN": fc[FcOp.QKV_GEN],
            "PROJ": fc[FcOp.PROJ],
        }
    return out


def reproduce_pingpong(t_cur: int = 16384) -> dict:
    prof = _op_latency_profile(t_cur=t_cur)
    checks = {}
    passed = True
    for op, (lo, hi) in PINGPONG_BANDS.items():
        serial = prof["serial"][op]["cycles"]
        pp = prof["pingpong"][op]["cycles"]
        red = 100.0 * (1.0 - pp / serial)
        ok = lo <= red <= hi
        passed &= ok
        checks[op] = {
            "serial_cycles": serial,
            "pingpong_cycles": pp,
            "reduction_pct": red,
            "band": [lo, hi],
            "ok": ok,
        }
    return {"figure": "PINGPONG", "passed": bool(passed), "checks": checks}


def reproduce_latency_bd(t_cur: int = 16384) -> dict:
    prof = _op_latency_profile(t_cur=t_cur)
    checks = {}
    passed = True
    for op in ("QKT", "SV"):
        bd = prof["serial"][op]["breakdown"]
        total = sum(bd.values())
        dt = bd.get("DT-GB", 0.0) + bd.get("DT-Out", 0.0)
        share = 100.0 * dt / total
        ok = share > 50.0
        passed &= ok
        checks[op] = {"dt_share_pct": share, "threshold": 50.0, "ok": ok}
    return {
        "figure": "LATENCY_BD",
        "passed": bool(passed),
        "checks": checks,
        "profile": {
            op: prof["serial"][op]["breakdown"] for op in prof["serial"]
        },
    }


def reproduce_batch_growth(seed: int = 1234) -> dict:
    capacity = 1024  # rows: eight max-context reservations at 256 tokens/row
    spec = TraceSpec.preset("qmsum", n_requests=400, seed=seed)
    trace = [(r.input_len, r.out_len) for r in gen_trace(spec)]
    lazy = avg_batch_size(trace, capacity, Policy.LAZY)
    static = avg_batch_size(trace, capacity, Policy.STATIC_MAX)
    ratio = lazy / static
    short_spec = TraceSpec(
        mean=2300, std=200, min_len=2048, max_len=2651, n_requests=400,
        out_len_model=("uniform", 64, 256), seed=seed,
    )
    short = [(r.input_len, r.out_len) for r in gen_trace(short_spec)]
    lazy_s = avg_batch_size(short, capacity, Policy.LAZY)
    static_s = avg_batch_size(short, capacity, Policy.STATIC_MAX)
    ratio_s = lazy_s / static_s
    passed = ratio >= 1.8 and ratio_s >= 3.0
    return {
        "figure": "BATCH_GROWTH",
        "passed": bool(passed),
        "checks": {
            "qmsum": {
                "lazy": lazy, "static": static, "ratio": ratio,
                "floor": 1.8, "ok": ratio >= 1.8,
            },
            "short_low_variance": {
                "lazy": lazy_s, "static": static_s, "ratio": ratio_s,
                "floor": 3.0, "ok": ratio_s >= 3.0,
            },
        },
    }


TPP_GRID = ((32, 1), (16, 2), (8, 4), (4, 8))


def reproduce_tpp_sweep(
    n_requests: int = 200, seed: int = 7, grid=TPP_GRID
) -> dict:
    topo = PimTopology(nodes=4)
    timing = TimingParams()
    spec = TraceSpec.preset("musique", n_requests=n_requests, seed=seed)
    trace = gen_trace(spec)
    rows_on = sweep(trace, "7b", topo, timing, grid, Features())
    rows_off = sweep(trace, "7b", topo, timing, grid, Features(lazy_alloc=False))
    feas_on = [r for r in rows_on if r["feasible"]]
    feas_off = [r for r in rows_off if r["feasible"]]
    tps_on = [r["tokens_per_sec"] for r in feas_on]
    spread = max(tps_on) / min(tps_on)
    best_on = max(feas_on, key=lambda r: r["tokens_per_sec"])
    best_off = max(feas_off, key=lambda r: r["tokens_per_sec"])
    # per-plan improvement from dynamic allocation; the headline number is the
    # best point of the ratio (the claim is an "up to" figure)
    gains = {}
    dominated = True
    for r_on, r_off in zip(rows_on, rows_off):
        if r_on["feasible"] and r_off["feasible"]:
            g = r_on["tokens_per_sec"] / r_off["tokens_per_sec"]
            gains[f"{r_on['tp']}x{r_on['pp']}"] = g
            if g < 1.0 - 1e-9:
                dominated = False
    best_gain = max(gains.values())
    passed = spread >= 1.3 and best_gain >= 1.15 and dominated
    return {
        "figure": "TPP_SWEEP",
        "passed": bool(passed),
        "checks": {
            "combo_spread": {"value": spread, "floor": 1.3, "ok": spread >= 1.3},
            "best_point_gain": {
                "value": best_gain, "floor": 1.15, "ok": best_gain >= 1.15,
                "per_plan": gains,
            },
            "dpa_never_hurts": {"ok": dominated},
            "optimum_with_dpa": {"tp": best_on["tp"], "pp": best_on["pp"]},
            "optimum_without_dpa": {"tp": best_off["tp"], "pp": best_off["pp"]},
        },
        "sweep_dpa_on": rows_on,
        "sweep_dpa_off": rows_off,
    }


UTIL_SCALING_POINTS = (("7b", 4), ("14b", 5), ("72b", 16))


def baseline_plan(model: ModelConfig, topo: PimTopology) -> ParallelismPlan:
    """Most tensor-parallel plan a head-first static deployment can run.

    Walks tp downward (the conventional preference) until weights fit and one
    maximum-context request fits a single channel's rows under static
    reservation."""
    modules = topo.total_modules
    for tp in range(min(model.n_kv_heads, modules), 0, -1):
        if modules % tp or model.n_heads % tp or model.n_kv_heads % tp:
            continue
        pp = modules // tp
        if pp > model.n_layers:
            continue
        try:
            prog = compile_model(model, topo, tp=tp, pp=pp, strategy=Strategy.HEAD_FIRST)
        except Exception:
            continue
        st = prog.stages[0]
        units = st.geo.units_for(model.max_ctl)
        if units * st.geo.rows_per_unit <= topo.rows_per_bank - st.weight_rows:
            return ParallelismPlan(tp, pp)
    raise TraceError("no feasible baseline plan")


def reproduce_util_scaling(n_requests: int = 150, seed: int = 7) -> dict:
    """Best swept plan per scale, for the full system and for the baseline
    (head-first, static, serial buffers): both sides get their best case."""
    timing = TimingParams()
    results = {}
    off_features = Features(itpp=False, lazy_alloc=False, pingpong=False)
    for name, nodes in UTIL_SCALING_POINTS:
        topo = PimTopology(nodes=nodes)
        model = PRESETS[name]
        modules = topo.total_modules
        spec = TraceSpec.preset("musique", n_requests=n_requests, seed=seed)
        grid = [
            (tp, modules // tp)
            for tp in range(1, min(model.n_kv_heads, modules) + 1)
            if modules % tp == 0
            and model.n_heads % tp == 0
            and model.n_kv_heads % tp == 0
            and modules // tp <= model.n_layers
        ]
        rows_on = sweep(gen_trace(spec), model, topo, timing, grid, Features())
        rows_off = sweep(gen_trace(spec), model, topo, timing, grid, off_features)
        feas_on = [r for r in rows_on if r["feasible"]]
        feas_off = [r for r in rows_off if r["feasible"]]
        if not feas_on or not feas_off:
            raise TraceError(f"no feasible plan for {name} on {nodes} nodes")
        best = max(feas_on, key=lambda r: r["tokens_per_sec"])
        best_off = max(feas_off, key=lambda r: r["tokens_per_sec"])
        results[name] = {
            "nodes": nodes,
            "util_off": best_off["utilization_pct"],
            "util_on": best["utilization_pct"],
            "plan_off": {"tp": best_off["tp"], "pp": best_off["pp"]},
            "plan_on": {"tp": best["tp"], "pp": best["pp"]},
            "tokens_per_sec_on": best["tokens_per_sec"],
            "tokens_per_sec_off": best_off["tokens_per_sec"],
        }
    ratios = {k: v["util_on"] / v["util_off"] for k, v in results.items()}
    ons = [results[k]["util_on"] for k, _ in UTIL_SCALING_POINTS]
    offs = [results[k]["util_off"] for k, _ in UTIL_SCALING_POINTS]
    spread = max(ons) - min(ons)
    off_nonincreasing = all(offs[i] >= offs[i + 1] - 1e-9 for i in range(len(offs) - 1))
    passed = all(r >= 1.7 for r in ratios.values()) and spread <= 5.0 and off_nonincreasing
    return {
        "figure": "UTIL_SCALING",
        "passed": bool(passed),
        "checks": {
            "ratios": {k: {"value": v, "floor": 1.7, "ok": v >= 1.7} for k, v in ratios.items()},
            "on_spread_pts": {"value": spread, "ceiling": 5.0, "ok": spread <= 5.0},
            "off_non_increasing": {"values": offs, "ok": off_nonincreasing},
        },
        "results": results,
    }


def reproduce(figure_id: str, **kwargs) -> dict:
    """Run one scripted desk-scale experiment and check its bound."""
    fig = figure_id.upper()
    if fig == "BATCH_GROWTH":
        return reproduce_batch_growth(**kwargs)
    if fig == "LATENCY_BD":
        return reproduce_latency_bd(**kwargs)
    if fig == "PINGPONG":
        return reproduce_pingpong(**kwargs)
    if fig == "TPP_SWEEP":
        return reproduce_tpp_sweep(**kwargs)
    if fig == "UTIL_SCALING":
        return reproduce_util_scaling(**kwargs)
    raise ValueError(f"unknown figure id {figure_id!r}; choose from {FIGURES}")
