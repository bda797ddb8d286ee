"""Experiment driver: baseline vs instrumented variants, normalized metrics, CSV/JSON/text output."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .frontend import CoreConfig, run_sim
from .instrument import InstrumentOptions, instrument, parse_range, parse_variant
from .predictors import make_predictor
from .workloads import (KINDS, WorkloadSpec, build, build_correlated_instrumentation,
                        build_record_replay_instrumentation)

VARIANT_KINDS = ("baseline", "preexec", "record_replay", "correlated")

COLUMNS = ["variant", "seed", "status", "cycles", "committed", "branches", "mispredicts",
           "target_mispredicts", "target_instances", "boss_hits", "boss_misses", "path_hits",
           "wrong_hints", "mpki", "ipc", "target_mispredict_rate", "speedup", "ipc_gain", "overhead"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Variant:
    name: str
    kind: str = "preexec"
    options: InstrumentOptions = InstrumentOptions()
    boss: bool = True

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ConfigError(f"variant {self.name!r}: unknown kind {self.kind!r}")


BASELINE = Variant("baseline", "baseline", boss=False)


@dataclass
class Experiment:
    workload: WorkloadSpec
    predictor: dict = field(default_factory=lambda: {"kind": "tage"})
    core: CoreConfig = CoreConfig()
    variants: list = field(default_factory=list)
    seeds: tuple = (0,)
    output: Optional[str] = None

    def all_variants(self) -> list[Variant]:
        """The variant list with a baseline guaranteed first."""
        rest = [v for v in self.variants if v.kind != "baseline"]
        return [BASELINE] + rest

    def fingerprint(self) -> dict:
        """Settings that must agree for two reports to be comparable."""
        w = dataclasses.asdict(self.workload)
        w.pop("seed")
        core = {k: v for k, v in dataclasses.asdict(self.core).items() if k not in ("debug", "boss_enabled")}
        return {"workload": w, "predictor": dict(self.predictor), "core": core}


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6f}"
    return str(v)


def _program_for(variant: Variant, w):
    if variant.kind == "baseline":
        return w.program, None
    if variant.kind == "record_replay":
        return build_record_replay_instrumentation(w, variant.options.channel), None
    if variant.kind == "correlated":
        return build_correlated_instrumentation(w, variant.options.channel), None
    res = instrument(w.fresh_structured(), w.target, variant.options)
    return res.program, res.diagnostic


def run_variant(variant: Variant, w, exp: Experiment, seed: int) -> dict:
    row = {"variant": variant.name, "seed": seed}
    prog, diag = _program_for(variant, w)
    if diag is not None:
        row.update(status=f"rejected:{diag.code}")
        return row
    pred = make_predictor(seed=seed, **exp.predictor)
    core = dataclasses.replace(exp.core, boss_enabled=variant.boss)
    res = run_sim(prog, pred, core)
    s = res.stats
    tpc = prog.labels[w.target]
    row.update(status="ok" if s.terminated else "failed", cycles=s.cycles, committed=s.committed,
               branches=s.branches, mispredicts=s.mispredicts,
               target_mispredicts=s.pc_mispredicts(tpc), target_instances=s.pc_instances(tpc),
               boss_hits=s.boss_hits, boss_misses=s.boss_misses, path_hits=s.path_hits,
               wrong_hints=s.wrong_hints, mpki=s.mpki, ipc=s.ipc)
    return row


def derive(rows: list[dict]) -> list[dict]:
    """Add rate and baseline-normalized columns, recomputed from raw counts only."""
    base = {r["seed"]: r for r in rows if r["variant"] == "baseline" and r.get("status") == "ok"}
    out = []
    for r in rows:
        r = dict(r)
        if r.get("status") == "ok":
            r["mpki"] = r["mispredicts"] * 1000.0 / r["committed"] if r["committed"] else 0.0
            r["ipc"] = r["committed"] / r["cycles"] if r["cycles"] else 0.0
            n = r["target_instances"]
            r["target_mispredict_rate"] = r["target_mispredicts"] / n if n else 0.0
            b = base.get(r["seed"])
            if b is not None:
                r["speedup"] = b["cycles"] / r["cycles"]
                r["ipc_gain"] = r["ipc"] / (b["committed"] / b["cycles"])
                r["overhead"] = r["committed"] / b["committed"]
        out.append(r)
    return out


@dataclass
class Report:
    experiment: dict
    fingerprint: dict
    rows: list

    def csv(self) -> str:
        return rows_to_csv(self.rows, COLUMNS)

    def json(self) -> str:
        return json.dumps({"experiment": self.experiment, "fingerprint": self.fingerprint,
                           "rows": self.rows}, indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        return table(self.rows, ["variant", "seed", "status", "cycles", "speedup", "overhead",
                                 "target_mispredict_rate", "mpki", "ipc_gain"])


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([_fmt(r[c]) if c in r else "" for c in columns])
    return buf.getvalue()


def table(rows, columns) -> str:
    cells = [[c for c in columns]] + [[_fmt(r[c]) if c in r else "-" for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def run_experiment(exp: Experiment) -> Report:
    rows = []
    for seed in exp.seeds:
        w = build(dataclasses.replace(exp.workload, seed=seed))
        for v in exp.all_variants():
            rows.append(run_variant(v, w, exp, seed))
    rows = derive(rows)
    report = Report(_describe(exp), exp.fingerprint(), rows)
    if exp.output:
        write_report(report, exp.output)
    return report


def write_report(report: Report, outdir) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.csv())
    (out / "report.json").write_text(report.json())
    (out / "summary.txt").write_text(report.summary())


def _describe(exp: Experiment) -> dict:
    return {"workload": dataclasses.asdict(exp.workload), "predictor": dict(exp.predictor),
            "seeds": list(exp.seeds),
            "variants": [{"name": v.name, "kind": v.kind, "options": v.options.label, "boss": v.boss}
                         for v in exp.all_variants()]}


# --------------------------------------------------------------------------
# compare


def _geomean(xs):
    xs = [x for x in xs if x > 0]
    return math.exp(sum(math.log(x) for x in xs) / len(xs)) if xs else float("nan")


def compare(reports: list[dict]) -> list[dict]:
    """Align variant rows of comparable reports and append min/max/geomean rows.

    ``reports`` are parsed JSON reports. Rows of preexec variants that carry a
    coverage range also get ``overhead_vs_full``: their extra committed
    instructions relative to the full-coverage variant of the same shape.
    Aggregate rows cover the non-baseline variants only.
    """
    if not reports:
        raise ValueError("nothing to compare")
    fp = reports[0]["fingerprint"]
    for r in reports[1:]:
        if r["fingerprint"] != fp:
            raise ValueError("reports come from different workload, predictor or core settings")
    rows, seen = [], set()
    for rep in reports:
        for row in rep["rows"]:
            key = (row["variant"], row["seed"])
            if key in seen:
                continue
            seen.add(key)
            rows.append(dict(row))
    base = {r["seed"]: r for r in rows if r["variant"] == "baseline" and r.get("status") == "ok"}
    labels = {}
    for rep in reports:
        for v in rep["experiment"]["variants"]:
            if v["kind"] == "preexec":
                labels[v["name"]] = v["options"]
    full_of = {}
    for name, lab in labels.items():
        if "@" not in lab:
            full_of.setdefault(lab, name)
    by_key = {(r["variant"], r["seed"]): r for r in rows}
    for r in rows:
        lab = labels.get(r["variant"], "")
        if "@" not in lab or r.get("status") != "ok":
            continue
        full = by_key.get((full_of.get(lab.split("@")[0]), r["seed"]))
        b = base.get(r["seed"])
        if full and b and full.get("status") == "ok" and full["committed"] != b["committed"]:
            r["overhead_vs_full"] = (r["committed"] - b["committed"]) / (full["committed"] - b["committed"])
    ok = [r for r in rows if r.get("status") == "ok" and "speedup" in r and r["variant"] != "baseline"]
    out = list(rows)
    if ok:
        for label, fn in (("min", min), ("max", max), ("geomean", _geomean)):
            agg = {"variant": label, "seed": "-", "status": "-"}
            for col in ("speedup", "ipc_gain", "overhead"):
                agg[col] = fn([r[col] for r in ok])
            out.append(agg)
    return out


COMPARE_COLUMNS = ["variant", "seed", "status", "cycles", "committed", "speedup", "ipc_gain",
                   "overhead", "overhead_vs_full", "target_mispredict_rate", "mpki"]


# --------------------------------------------------------------------------
# config files

_BOOL = {"1": True, "on": True, "yes": True, "true": True, "0": False, "off": False, "no": False, "false": False}


def _bool(text: str, key: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"{key}: expected on/off, got {text!r}") from None


_VARIANT_KEYS = {"kind", "variant", "range", "channel", "strip_cap", "placement", "boss"}


def load_experiment(path_or_text: str, is_text: bool = False) -> Experiment:
    """Parse an INI experiment description (``[experiment]`` plus ``[variant.NAME]`` sections)."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        if is_text:
            cp.read_string(path_or_text)
        else:
            with open(path_or_text) as fh:
                cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(str(exc)) from None
    if "experiment" not in cp:
        raise ConfigError("missing [experiment] section")
    sec = cp["experiment"]
    known = {"workload", "trip", "generations", "seed", "seeds", "bias", "repeat_prob", "corr_prob",
             "chain_depth", "placement", "filler", "predictor", "predictor_entries", "predictor_history_bits",
             "width", "window", "resolve_delay", "refill_penalty", "max_cycles", "output",
             "wrong_path_pollution"}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"unknown [experiment] keys: {', '.join(sorted(unknown))}")
    try:
        kind = sec.get("workload", "synthetic")
        if kind not in KINDS:
            raise ConfigError(f"unknown workload {kind!r}")
        spec = WorkloadSpec(kind=kind, trip=sec.getint("trip", 4), generations=sec.getint("generations", 8),
                            seed=sec.getint("seed", 0), bias=sec.getfloat("bias", 0.5),
                            repeat_prob=sec.getfloat("repeat_prob", 0.93), corr_prob=sec.getfloat("corr_prob", 1.0),
                            chain_depth=sec.getint("chain_depth", 1), placement=sec.get("placement", "hot"),
                            filler=sec.getint("filler", 200))
        pred = {"kind": sec.get("predictor", "tage")}
        if "predictor_entries" in sec:
            key = "base_entries" if pred["kind"].startswith("tage") else "entries"
            pred[key] = sec.getint("predictor_entries")
        if "predictor_history_bits" in sec:
            pred["history_bits"] = sec.getint("predictor_history_bits")
        make_predictor(**pred)
        core = CoreConfig(width=sec.getint("width", 8), window=sec.getint("window", 192),
                          resolve_delay=sec.getint("resolve_delay", 6),
                          refill_penalty=sec.getint("refill_penalty", 12),
                          max_cycles=sec.getint("max_cycles", 50_000_000),
                          wrong_path_pollution=_bool(sec.get("wrong_path_pollution", "off"), "wrong_path_pollution"))
        seeds = tuple(int(s) for s in sec.get("seeds", str(spec.seed)).replace(",", " ").split())
        variants = []
        for name in cp.sections():
            if not name.startswith("variant."):
                if name != "experiment":
                    raise ConfigError(f"unknown section [{name}]")
                continue
            vs = cp[name]
            bad = set(vs) - _VARIANT_KEYS
            if bad:
                raise ConfigError(f"unknown [{name}] keys: {', '.join(sorted(bad))}")
            vname = name.split(".", 1)[1]
            vkind = vs.get("kind", "preexec")
            opts = {}
            if "variant" in vs:
                opts["variant"], opts["factor"] = parse_variant(vs["variant"])
            if "range" in vs:
                opts["coverage"] = parse_range(vs["range"])
            for key in ("channel", "strip_cap"):
                if key in vs:
                    opts[key] = vs.getint(key)
            if "placement" in vs:
                opts["placement"] = vs["placement"]
            variants.append(Variant(vname, vkind, InstrumentOptions(**opts), _bool(vs.get("boss", "on"), "boss")))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return Experiment(spec, pred, core, variants, seeds, sec.get("output"))
