"""Pipeline driver, experiment matrix, reports and the `flashvm` command."""

from __future__ import annotations

import csv
import io
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import click

from .air import IRError, Program, load_program, parse_program, print_program
from .baselines import BASELINE_NAMES, BaselineConfig, BaselineConfigError, build_baseline
from .emulator import (EXECUTE, PROBE, PROFILES, EmulatorError, PowerSchedule, RunMetrics,
                       dump_trace, run_continuous, run_intermittent)
from .layout import MemoryLayout, assign_layout
from .mapping import (MappingReport, consolidate_reads, load_model, map_reads, map_writes,
                      verify_mapping)
from .normalize import normalize_all
from .placement import (PlacementStrategy, extract_intervals, normalize_interval_boundaries,
                        place_checkpoints)
from .versioning import (VersionPlan, annotate_exits, apply_versioning, detect_war_hazards,
                         normalize_versioning_uncertainties, plan_partial_update_copies)

V = "volatile"
CORPUS = ("crc16", "fft8", "feistel")


class PipelineError(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    program: Program
    layout: MemoryLayout
    report: MappingReport
    plan: VersionPlan
    intervals: list = field(default_factory=list)


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except PipelineError:
        raise
    except Exception as e:     # attribute any module error to its stage
        raise PipelineError(name, e) from e


def run_pipeline(program: Program | str, placement: PlacementStrategy | str | None = "loop-latch",
                 model=None) -> PipelineResult:
    """place -> boundaries -> intervals -> tags -> normalize -> map -> consolidate -> version -> layout.

    placement None (or Manual) keeps the checkpoints already in the program.
    """
    from .air import compute_memory_tags
    if isinstance(model, str) or model is None:
        model = load_model(model or "msp430fr5969-16mhz")
    if isinstance(program, str):
        program = _stage("parse", parse_program, program)
    p = program
    if placement is not None:
        p = _stage("placement", place_checkpoints, p, placement)
    p = _stage("boundaries", normalize_interval_boundaries, p)
    intervals = _stage("intervals", extract_intervals, p)
    p = _stage("tags", compute_memory_tags, p)
    report = MappingReport()
    p, findings = _stage("normalize", normalize_all, p)
    report.normalization = [f.to_json() for f in findings]
    p = _stage("map-writes", map_writes, p, intervals, report)
    p = _stage("map-reads", map_reads, p, intervals, report)
    p = _stage("consolidate", consolidate_reads, p, intervals, model, report)
    hz = _stage("hazards", detect_war_hazards, p, intervals)
    p, hz, notes = _stage("versioning-normalize", normalize_versioning_uncertainties, p, intervals, model, hz)
    p, plan = _stage("versioning", apply_versioning, p, hz)
    plan = _stage("partial-updates", plan_partial_update_copies, p, intervals, plan)
    p = _stage("versioning", annotate_exits, p, plan)
    plan.loop_copies = notes["loop"]
    report.versioning = {"hazards": [{"tag": str(h.tag), "write": h.write, "read": h.read} for h in hz],
                         "plan": plan.to_json(),
                         "normalized": [f.to_json() for f in notes["conditional"]]}
    problems = _stage("verify", verify_mapping, p)
    if problems:
        raise PipelineError("verify", IRError("; ".join(problems)))
    lay = _stage("layout", assign_layout, p, plan)
    return PipelineResult(p, lay, report, plan, intervals)


# ---------------------------------------------------------------- corpus

def corpus_program(name: str) -> Program:
    text = resources.files("flashvm").joinpath(f"corpus/{name}.air").read_text()
    return parse_program(text)


def corpus_golden(name: str) -> dict:
    return json.loads(resources.files("flashvm").joinpath(f"corpus/{name}.json").read_text())


# ---------------------------------------------------------------- arms

@dataclass
class Arm:
    name: str
    program: Program
    layout: MemoryLayout
    policy: object
    flashvm: bool = False


def build_arm(p: Program, name: str, model) -> Arm:
    """'flashvm' (loop-latch), 'flashvm-<ll|fr|idem>' or a baseline name."""
    if name == "flashvm" or name.startswith("flashvm-"):
        short = name.split("-", 1)[1] if "-" in name else "ll"
        strat = {"ll": "loop-latch", "fr": "function-return", "idem": "idempotent"}.get(short)
        if strat is None:
            raise BaselineConfigError(f"unknown flashvm arm {name!r}")
        r = run_pipeline(p, strat, model)
        return Arm(name, r.program, r.layout, EXECUTE, True)
    b = build_baseline(p, name)
    return Arm(name, b.program, b.layout, b.config.policy)


@dataclass
class ExperimentSpec:
    program: str
    arms: list = field(default_factory=lambda: ["flashvm", *BASELINE_NAMES])
    models: list = field(default_factory=lambda: ["msp430fr5969-16mhz"])
    schedule: dict = field(default_factory=lambda: {"profile": "avg"})
    seeds: list = field(default_factory=lambda: list(range(10)))
    inputs: dict = field(default_factory=dict)
    output: str | None = None

    @classmethod
    def from_json(cls, doc: dict, base: Path | None = None) -> ExperimentSpec:
        extra = set(doc) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown experiment fields: {sorted(extra)}")
        spec = cls(**doc)
        if isinstance(spec.seeds, int):
            spec.seeds = list(range(spec.seeds))
        if base is not None and not Path(spec.program).is_absolute() and spec.program not in CORPUS:
            spec.program = str(base / spec.program)
        return spec


def _load_any(program: str) -> Program:
    if program in CORPUS:
        return corpus_program(program)
    return load_program(program)


def promotion_percent(m: RunMetrics) -> float:
    """Share of executed original accesses that ran against volatile memory."""
    vol = m.count("v_read", "original") + m.count("v_write", "original")
    total = vol + m.count("nv_read", "original") + m.count("nv_write", "original")
    return 100.0 * vol / total if total else 0.0


COLUMNS = ("program", "arm", "model", "schedule", "seed", "status", "equivalent", "energy_nJ", "cycles",
           "v_reads", "v_writes", "nv_reads", "nv_writes", "checkpoint_calls", "saves", "restores",
           "failures", "volatile_words", "nonvolatile_words", "promotion_pct")


def run_experiment_matrix(spec: ExperimentSpec) -> list[dict]:
    """One row per arm x model x seed; arms share program, inputs and schedule seeds."""
    p = _load_any(spec.program)
    rows = []
    for model_name in spec.models:
        model = load_model(model_name)
        for arm_name in spec.arms:
            try:
                arm = build_arm(p, arm_name, model)
            except Exception as e:
                rows.append({"program": spec.program, "arm": arm_name, "model": model_name,
                             "status": f"error: {e}"})
                continue
            ref = run_continuous(arm.program, arm.layout, model, spec.inputs, arm.policy)
            occ = arm.layout.used_words()
            for seed in spec.seeds:
                sched = PowerSchedule.from_json({**spec.schedule, "seed": seed})
                try:
                    res = run_intermittent(arm.program, arm.layout, model, sched, arm.policy, spec.inputs)
                except EmulatorError as e:
                    rows.append({"program": spec.program, "arm": arm_name, "model": model_name,
                                 "seed": seed, "status": f"error: {e}"})
                    continue
                m = res.metrics
                rows.append({
                    "program": spec.program, "arm": arm_name, "model": model_name,
                    "schedule": sched.profile if sched.profile != "custom" else sched.mode,
                    "seed": seed, "status": m.status,
                    "equivalent": m.status == "completed" and res.globals == ref.globals
                    and res.outputs == ref.outputs,
                    "energy_nJ": round(m.energy_nJ, 4), "cycles": m.cycles,
                    "v_reads": m.count("v_read"), "v_writes": m.count("v_write"),
                    "nv_reads": m.count("nv_read"), "nv_writes": m.count("nv_write"),
                    "checkpoint_calls": m.checkpoint_calls, "saves": m.saves, "restores": m.restores,
                    "failures": m.failures, "volatile_words": occ[V], "nonvolatile_words": occ["nonvolatile"],
                    "promotion_pct": round(promotion_percent(m), 2) if arm.flashvm else "",
                })
    return rows


def summarize(rows: list[dict]) -> str:
    """Per-arm means of the main metrics as a fixed-width table."""
    groups: dict = {}
    for r in rows:
        if "energy_nJ" in r:
            groups.setdefault((r["program"], r["arm"], r["model"]), []).append(r)
    out = [f"{'program':<10} {'arm':<26} {'model':<20} {'energy nJ':>12} {'cycles':>10} {'restores':>9}"
           f" {'promo %':>8} {'ok':>5}"]
    for (prog, arm, model), rs in groups.items():
        n = len(rs)
        promo = rs[0]["promotion_pct"]
        ok = sum(1 for r in rs if r["equivalent"])
        out.append(f"{Path(prog).stem:<10} {arm:<26} {model:<20} {sum(r['energy_nJ'] for r in rs) / n:>12.1f}"
                   f" {sum(r['cycles'] for r in rs) / n:>10.0f} {sum(r['restores'] for r in rs) / n:>9.1f}"
                   f" {promo if promo == '' else format(promo, '.1f'):>8} {ok:>2}/{n:<2}")
    errors = [r for r in rows if "energy_nJ" not in r]
    for r in errors:
        out.append(f"{Path(r['program']).stem:<10} {r['arm']:<26} {r['status']}")
    return "\n".join(out) + "\n"


def emit_report(results: list[dict], out_dir: str | Path | None = None) -> dict[str, str]:
    """Write results.csv, results.json and summary.txt; returns the rendered texts by file name."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, extrasaction="ignore")
    w.writeheader()
    for r in results:
        w.writerow(r)
    texts = {"results.csv": buf.getvalue(), "results.json": json.dumps(results, indent=1, default=str),
             "summary.txt": summarize(results)}
    if out_dir is not None:
        d = Path(out_dir)
        try:
            d.mkdir(parents=True, exist_ok=True)
            for name, text in texts.items():
                (d / name).write_text(text)
        except OSError as e:
            raise OSError(f"cannot write report to {d}: {e}") from e
    return texts


# ---------------------------------------------------------------- command line

class ConfigError(click.ClickException):
    exit_code = 2


def _model(name):
    try:
        return load_model(name)
    except (ValueError, OSError) as e:
        raise ConfigError(str(e)) from e


def _read_program(path):
    try:
        return load_program(path)
    except (IRError, OSError) as e:
        raise ConfigError(f"{path}: {e}") from e


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Compile-time volatile/non-volatile memory mapping for intermittent programs."""


@main.command()
@click.argument("program", type=click.Path(exists=True, dir_okay=False))
@click.option("--placement", default="loop-latch", show_default=True,
              help="loop-latch, function-return, idempotent or manual")
@click.option("--model", default="msp430fr5969-16mhz", show_default=True, help="preset name or JSON path")
@click.option("-o", "--output", type=click.Path(dir_okay=False), help="transformed program (default stdout)")
@click.option("--report", type=click.Path(dir_okay=False), help="mapping report JSON")
@click.option("--layout-map", type=click.Path(dir_okay=False), help="layout map text file")
def transform(program, placement, model, output, report, layout_map):
    """Run the full pipeline on PROGRAM."""
    p = _read_program(program)
    m = _model(model)
    try:
        strat = None if placement == "manual" else PlacementStrategy.parse(placement)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    try:
        r = run_pipeline(p, strat, m)
    except PipelineError as e:
        raise ConfigError(f"stage {e.stage}: {e.cause}") from e
    text = print_program(r.program)
    if output:
        Path(output).write_text(text)
    else:
        click.echo(text, nl=False)
    if report:
        Path(report).write_text(json.dumps(r.report.to_json(), indent=1, default=str))
    if layout_map:
        Path(layout_map).write_text(r.layout.dump())


@main.command()
@click.argument("program", type=click.Path(exists=True, dir_okay=False))
@click.option("--schedule", type=click.Path(exists=True, dir_okay=False), help="PowerSchedule JSON")
@click.option("--profile", type=click.Choice(sorted(PROFILES)), help="stand-in cycle profile")
@click.option("--seed", default=0, show_default=True)
@click.option("--model", default="msp430fr5969-16mhz", show_default=True)
@click.option("--intermittent", is_flag=True, help="inject power failures")
@click.option("--policy", type=click.Choice(["execute", "probe"]), default="execute", show_default=True)
@click.option("--inputs", type=click.Path(exists=True, dir_okay=False), help="JSON of global name -> values")
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), help="JSON-lines trace output")
def run(program, schedule, profile, seed, model, intermittent, policy, inputs, trace_path):
    """Execute an already transformed PROGRAM and print final globals and metrics."""
    import os
    p = _read_program(program)
    m = _model(model)
    ins = json.loads(Path(inputs).read_text()) if inputs else None
    pol = PROBE if policy == "probe" else EXECUTE
    tracing = bool(trace_path) or os.environ.get("FLASHVM_TRACE") == "1"
    try:
        if intermittent:
            if schedule:
                sched = PowerSchedule.from_json({**json.loads(Path(schedule).read_text())})
            else:
                sched = PowerSchedule.profile_named(profile or "avg", seed)
            res = run_intermittent(p, None, m, sched, pol, ins, trace=tracing)
        else:
            res = run_continuous(p, None, m, ins, pol, trace=tracing)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    except EmulatorError as e:
        raise click.ClickException(str(e)) from e
    if res.trace is not None:
        dump_trace(res.trace, trace_path or "flashvm-trace.jsonl")
    click.echo(json.dumps({"globals": res.globals, "outputs": res.outputs,
                           "metrics": res.metrics.to_json()}, indent=1))
    if res.metrics.status == "livelock":
        sys.exit(3)


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out-dir", type=click.Path(file_okay=False), help="report directory")
def bench(spec_path, out_dir):
    """Run an experiment matrix and write CSV, JSON and a summary."""
    try:
        doc = json.loads(Path(spec_path).read_text())
        spec = ExperimentSpec.from_json(doc, Path(spec_path).parent)
        for a in spec.arms:
            if not (a == "flashvm" or a.startswith("flashvm-")):
                BaselineConfig.parse(a)
        for mname in spec.models:
            load_model(mname)
    except (ValueError, TypeError, json.JSONDecodeError) as e:
        raise ConfigError(str(e)) from e
    rows = run_experiment_matrix(spec)
    texts = emit_report(rows, out_dir or spec.output)
    click.echo(texts["summary.txt"], nl=False)
    if any(r.get("status") == "livelock" for r in rows):
        sys.exit(3)


if __name__ == "__main__":
    main()
