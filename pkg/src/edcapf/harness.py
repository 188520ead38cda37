"""Scenario files, command implementations and CSV emission.

A scenario file is YAML with the sections ``timings``, ``global``,
``classes``, ``scenario`` (run length, seed, membership/parameter events),
``sweep``, ``controller`` and ``outputs``. Durations are in microseconds and
rates in Mbps (numerically bits/us). The column layout of every table is
documented in ``docs/csv_schema.md``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import yaml

from . import analytics, control, optimizer
from . import sim as simulator
from .config import (AIFSN, TABLE1, TXOP_LIMITS, AcClass, NetworkConfig, ProtocolTimings,
                     burst_size)
from .errors import ConfigError, EdcaError

OUTPUT_GROUPS = ("throughput", "delay", "airtime", "tau", "cw", "pfail")
SWEEP_FIELDS = ("p", "d", "r", "n", "cw_min")
EVENT_ACTIONS = ("add", "remove", "set")
EVENT_FIELDS = ("p", "d")
PLANTS = ("sim", "analytic")
MEASUREMENTS = ("beacon", "window")


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class Event:
    at: float
    action: str
    ac: str
    field: str | None = None
    value: float | None = None


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple[float, ...]
    simulate: bool = False
    sim_duration: float = 10e6

    @property
    def target(self) -> tuple[str, str]:
        ac, _, fld = self.parameter.partition(".")
        return ac, fld


@dataclass(frozen=True)
class ControllerSettings:
    state_weight: float = control.DEFAULT_STATE_WEIGHT
    integral_weight: float = control.DEFAULT_INTEGRAL_WEIGHT
    control_weight: float = control.DEFAULT_CONTROL_WEIGHT
    enabled: bool = True
    plant: str = "sim"
    measurement: str = "beacon"
    window: int = 10
    band: float = 0.02
    cw_floor: float = 1.0

    def weights(self, N: int):
        return control.default_weights(N, self.state_weight, self.integral_weight,
                                       self.control_weight)


@dataclass(frozen=True)
class Scenario:
    name: str
    config: NetworkConfig
    events: tuple[Event, ...] = ()
    sweep: SweepSpec | None = None
    outputs: tuple[str, ...] = OUTPUT_GROUPS
    duration: float = 10e6
    seed: int = 0
    controller: ControllerSettings = ControllerSettings()
    txop_limits: dict = field(default_factory=dict, compare=False)


# ---------------------------------------------------------------------------
# YAML with line numbers


def _compose(text: str):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None) from None
    return node


def _plain(node, path: str, lines: dict):
    """Convert a composed node to Python objects, recording the line of every path."""
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = str(yaml.SafeLoader("").construct_object(k))
            out[key] = _plain(v, f"{path}.{key}" if path else key, lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_plain(v, f"{path}[{i}]", lines) for i, v in enumerate(node.value)]
    return yaml.SafeLoader("").construct_object(node)


class _Reader:
    """Typed access to a section with field/line diagnostics."""

    def __init__(self, data: dict, path: str, lines: dict):
        if not isinstance(data, dict):
            raise ConfigError("expected a mapping", field=path or None, line=lines.get(path))
        self.data, self.path, self.lines = data, path, lines

    def _where(self, key):
        p = f"{self.path}.{key}" if self.path else key
        return p, self.lines.get(p, self.lines.get(self.path))

    def has(self, key):
        return key in self.data and self.data[key] is not None

    def check_keys(self, allowed: Iterable[str]):
        allowed = set(allowed)
        for key in self.data:
            if key not in allowed:
                p, line = self._where(key)
                raise ConfigError(f"unknown key {key!r}; expected one of {sorted(allowed)}",
                                  field=p, line=line)

    def raw(self, key, default=None, required=False):
        if key not in self.data or self.data[key] is None:
            if required:
                p, line = self._where(key)
                raise ConfigError(f"missing required field {key!r}", field=p, line=line)
            return default
        return self.data[key]

    def number(self, key, default=None, required=False, kind=float, allow_inf=False):
        v = self.raw(key, default, required)
        if v is None:
            return None
        p, line = self._where(key)
        if isinstance(v, bool):
            raise ConfigError(f"{key} must be a number, got {v!r}", field=p, line=line)
        try:
            x = float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be a number, got {v!r}", field=p, line=line) from None
        if math.isnan(x) or (math.isinf(x) and not allow_inf):
            raise ConfigError(f"{key} must be finite, got {v!r}", field=p, line=line)
        if kind is int:
            if not x.is_integer():
                raise ConfigError(f"{key} must be an integer, got {v!r}", field=p, line=line)
            return int(x)
        return x

    def text(self, key, default=None, required=False, choices=None):
        v = self.raw(key, default, required)
        if v is None:
            return None
        p, line = self._where(key)
        v = str(v)
        if choices is not None and v not in choices:
            raise ConfigError(f"{key} must be one of {list(choices)}, got {v!r}", field=p, line=line)
        return v

    def flag(self, key, default=False):
        v = self.raw(key, default)
        if not isinstance(v, bool):
            p, line = self._where(key)
            raise ConfigError(f"{key} must be true or false, got {v!r}", field=p, line=line)
        return v

    def sub(self, key):
        v = self.raw(key, {})
        p, _ = self._where(key)
        return _Reader(v, p, self.lines)

    def items(self, key):
        v = self.raw(key, [])
        p, line = self._where(key)
        if not isinstance(v, list):
            raise ConfigError(f"{key} must be a list", field=p, line=line)
        return [_Reader(item, f"{p}[{i}]", self.lines) for i, item in enumerate(v)]

    def fail(self, key, message):
        p, line = self._where(key)
        raise ConfigError(message, field=p, line=line)


# ---------------------------------------------------------------------------
# parsing


def _with_location(reader: _Reader, key: str, fn: Callable):
    """Re-anchor a constructor's ConfigError on the file path and line.

    The error's own field is used when it names a key of this section,
    otherwise the location of ``key``.
    """
    try:
        return fn()
    except ConfigError as exc:
        if exc.line is None:
            leaf = (exc.field or "").rpartition(".")[2]
            path, line = reader._where(leaf if leaf in reader.data else key)
            field = path if leaf in reader.data else exc.field
            raise ConfigError(exc.message, field=field, line=line) from None
        raise


def _parse_timings(r: _Reader) -> ProtocolTimings:
    names = [f.name for f in dataclasses.fields(ProtocolTimings)]
    r.check_keys(names)
    values = {k: r.number(k) for k in names if r.has(k)}
    if "eifs" in values:
        return _with_location(r, "eifs", lambda: ProtocolTimings(**{
            **{f.name: getattr(TABLE1, f.name) for f in dataclasses.fields(ProtocolTimings)},
            **values}))
    return _with_location(r, "", lambda: ProtocolTimings.derived(**values))


def _parse_class(r: _Reader, timings: ProtocolTimings, L: float, txop: dict) -> AcClass:
    r.check_keys(["name", "n", "p", "r", "t", "M", "txop_limit", "d", "cw_min"])
    name = r.text("name", required=True)
    n = r.number("n", required=True, kind=int)
    p = r.number("p", required=True)
    rate = r.number("r", required=True)
    t = r.number("t", required=True, kind=int)
    if r.has("M") and r.has("txop_limit"):
        r.fail("M", "give either M or txop_limit, not both")
    if r.has("txop_limit"):
        limit = r.number("txop_limit")
        if limit < 0:
            r.fail("txop_limit", f"txop_limit must be >= 0, got {limit}")
        if not rate > 0:
            r.fail("r", f"r must be positive, got {rate!r}")
        M = burst_size(limit, rate, L, timings)
        txop[name] = limit
    else:
        M = r.number("M", default=1, kind=int)
    d = r.number("d", default=math.inf, allow_inf=True)
    cw = r.number("cw_min", default=15.0)
    return _with_location(r, "name", lambda: AcClass(
        name=name, n=n, p=p, r=rate, t=t, M=M, d=d, cw_min=cw))


def _parse_events(items: list[_Reader], names: list[str]) -> tuple[Event, ...]:
    events, last = [], -math.inf
    for r in items:
        r.check_keys(["at", "action", "ac", "field", "value"])
        at = r.number("at", required=True)
        if at <= last:
            r.fail("at", f"event times must be strictly increasing ({at} after {last})")
        if at < 0:
            r.fail("at", f"event time must be >= 0, got {at}")
        last = at
        action = r.text("action", required=True, choices=EVENT_ACTIONS)
        ac = r.text("ac", required=True)
        if ac not in names:
            r.fail("ac", f"unknown access category {ac!r}; known: {names}")
        fld = value = None
        if action == "set":
            fld = r.text("field", required=True, choices=EVENT_FIELDS)
            value = r.number("value", required=True, allow_inf=(fld == "d"))
        elif r.has("field") or r.has("value"):
            r.fail("field", f"'{action}' events take no field/value")
        events.append(Event(at, action, ac, fld, value))
    return tuple(events)


def _parse_sweep(r: _Reader, names: list[str]) -> SweepSpec:
    r.check_keys(["parameter", "values", "start", "stop", "steps", "scale", "simulate",
                  "sim_duration"])
    param = r.text("parameter", required=True)
    ac, _, fld = param.partition(".")
    if ac not in names or fld not in SWEEP_FIELDS:
        r.fail("parameter", f"parameter must be '<AC>.<field>' with AC in {names} "
                            f"and field in {list(SWEEP_FIELDS)}, got {param!r}")
    if r.has("values"):
        if any(r.has(k) for k in ("start", "stop", "steps", "scale")):
            r.fail("values", "give either values or start/stop/steps, not both")
        raw = r.raw("values")
        if not isinstance(raw, list) or not raw:
            r.fail("values", "values must be a non-empty list")
        vals = []
        for i, v in enumerate(raw):
            try:
                vals.append(float(v))
            except (TypeError, ValueError):
                r.fail(f"values[{i}]", f"sweep value must be a number, got {v!r}")
    else:
        start = r.number("start", required=True)
        stop = r.number("stop", required=True)
        steps = r.number("steps", required=True, kind=int)
        if steps < 1:
            r.fail("steps", f"steps must be >= 1, got {steps}")
        scale = r.text("scale", default="linear", choices=("linear", "log"))
        if scale == "log":
            if start <= 0 or stop <= 0:
                r.fail("start", "log sweeps need positive start and stop")
            vals = np.geomspace(start, stop, steps).tolist()
        else:
            vals = np.linspace(start, stop, steps).tolist()
    duration = r.number("sim_duration", default=10e6)
    if duration <= 0:
        r.fail("sim_duration", f"sim_duration must be positive, got {duration}")
    return SweepSpec(param, tuple(vals), r.flag("simulate"), duration)


def _parse_controller(r: _Reader) -> ControllerSettings:
    r.check_keys([f.name for f in dataclasses.fields(ControllerSettings)])
    d = ControllerSettings()
    out = ControllerSettings(
        state_weight=r.number("state_weight", default=d.state_weight),
        integral_weight=r.number("integral_weight", default=d.integral_weight),
        control_weight=r.number("control_weight", default=d.control_weight),
        enabled=r.flag("enabled", d.enabled),
        plant=r.text("plant", default=d.plant, choices=PLANTS),
        measurement=r.text("measurement", default=d.measurement, choices=MEASUREMENTS),
        window=r.number("window", default=d.window, kind=int),
        band=r.number("band", default=d.band),
        cw_floor=r.number("cw_floor", default=d.cw_floor),
    )
    for key in ("state_weight", "integral_weight", "control_weight", "band"):
        if not getattr(out, key) > 0:
            r.fail(key, f"{key} must be positive")
    if out.window < 1:
        r.fail("window", "window must be >= 1")
    if out.cw_floor < 1:
        r.fail("cw_floor", "cw_floor must be >= 1")
    return out


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    """Parse and validate scenario text; errors are ConfigError with field and line."""
    node = _compose(text)
    if node is None:
        raise ConfigError("empty configuration")
    lines: dict = {}
    root = _Reader(_plain(node, "", lines), "", lines)
    root.check_keys(["name", "timings", "global", "classes", "scenario", "sweep",
                     "controller", "outputs"])
    timings = _parse_timings(root.sub("timings"))
    g = root.sub("global")
    g.check_keys(["L", "m", "beacon"])
    L = g.number("L", default=8000.0)
    m = g.number("m", default=5, kind=int)
    beacon = g.number("beacon", default=100_000.0)
    if not L > 0:
        g.fail("L", f"L must be positive, got {L}")
    txop: dict = {}
    items = root.items("classes")
    if not items:
        root.fail("classes", "at least one access category is required")
    classes = tuple(_parse_class(r, timings, L, txop) for r in items)
    cfg = _with_location(root, "classes", lambda: NetworkConfig(classes, timings, L, m, beacon))

    sc = root.sub("scenario")
    sc.check_keys(["duration", "seed", "events"])
    duration = sc.number("duration", default=10e6)
    if not duration >= cfg.beacon:
        sc.fail("duration", f"duration must cover at least one beacon ({cfg.beacon} us)")
    seed = sc.number("seed", default=0, kind=int)
    events = _parse_events(sc.items("events"), cfg.names)
    if events and events[-1].at >= duration:
        sc.fail("events", "events must occur before the end of the run")
    sweep = _parse_sweep(root.sub("sweep"), cfg.names) if root.has("sweep") else None
    if sweep is not None and events:
        root.fail("sweep", "a scenario has either a sweep or an event timeline, not both")
    outputs = root.raw("outputs", list(OUTPUT_GROUPS))
    if not isinstance(outputs, list) or not outputs:
        root.fail("outputs", "outputs must be a non-empty list")
    for i, o in enumerate(outputs):
        if o not in OUTPUT_GROUPS:
            root.fail(f"outputs[{i}]", f"unknown output {o!r}; expected one of {list(OUTPUT_GROUPS)}")
    ordered = tuple(o for o in OUTPUT_GROUPS if o in outputs)
    ctrl = _parse_controller(root.sub("controller"))
    _check_timeline(cfg, events, root)
    return Scenario(name=root.text("name", default=name), config=cfg, events=events,
                    sweep=sweep, outputs=ordered, duration=duration, seed=seed,
                    controller=ctrl, txop_limits=txop)


def _check_timeline(cfg: NetworkConfig, events, root: _Reader):
    n = {c.name: c.n for c in cfg.classes}
    for k, ev in enumerate(events):
        if ev.action == "add":
            n[ev.ac] += 1
        elif ev.action == "remove":
            n[ev.ac] -= 1
            if n[ev.ac] < 0:
                root.fail(f"scenario.events[{k}]", f"no station of {ev.ac} left to remove")
        if not any(v > 0 for v in n.values()):
            root.fail(f"scenario.events[{k}]", "the network would become empty")


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_scenario(text, name=os.path.splitext(os.path.basename(path))[0])


def _num(x):
    if isinstance(x, float) and math.isinf(x):
        return None
    if isinstance(x, float) and x.is_integer() and abs(x) < 1e15:
        return int(x)
    return x


def scenario_to_dict(sc: Scenario) -> dict:
    cfg = sc.config
    classes = []
    for c in cfg.classes:
        entry = {"name": c.name, "n": c.n, "p": _num(c.p), "r": _num(c.r), "t": c.t}
        if c.name in sc.txop_limits:
            entry["txop_limit"] = _num(sc.txop_limits[c.name])
        else:
            entry["M"] = c.M
        entry["d"] = _num(c.d)
        entry["cw_min"] = _num(c.cw_min)
        classes.append(entry)
    out = {
        "name": sc.name,
        "timings": {f.name: _num(getattr(cfg.timings, f.name))
                    for f in dataclasses.fields(ProtocolTimings)},
        "global": {"L": _num(cfg.L), "m": cfg.m, "beacon": _num(cfg.beacon)},
        "classes": classes,
        "scenario": {"duration": _num(sc.duration), "seed": sc.seed,
                     "events": [_event_dict(e) for e in sc.events]},
        "controller": {k: _num(v) for k, v in dataclasses.asdict(sc.controller).items()},
        "outputs": list(sc.outputs),
    }
    if sc.sweep is not None:
        out["sweep"] = {"parameter": sc.sweep.parameter,
                        "values": [_num(v) for v in sc.sweep.values],
                        "simulate": sc.sweep.simulate,
                        "sim_duration": _num(sc.sweep.sim_duration)}
    return out


def _event_dict(e: Event) -> dict:
    d = {"at": _num(e.at), "action": e.action, "ac": e.ac}
    if e.action == "set":
        d["field"] = e.field
        d["value"] = _num(e.value)
    return d


def serialize(sc: Scenario) -> str:
    """Normalised YAML; ``serialize(parse(serialize(s))) == serialize(s)``."""
    return yaml.safe_dump(scenario_to_dict(sc), sort_keys=False, default_flow_style=None)


# ---------------------------------------------------------------------------
# CSV


def fmt(x) -> str:
    """Deterministic text for a CSV cell."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return ""
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".12g")
    return str(x)


class CsvWriter:
    """RFC-4180 writer (CRLF, minimal quoting) that flushes every row."""

    def __init__(self, stream, columns: list[str]):
        self.stream = stream
        self.columns = list(columns)
        self._w = csv.writer(stream, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
        self._w.writerow(self.columns)
        self.rows = 0

    def write(self, row: dict):
        self._w.writerow([fmt(row.get(c)) for c in self.columns])
        self.rows += 1
        self.stream.flush()


def render_csv(columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO(newline="")
    w = CsvWriter(buf, columns)
    for row in rows:
        w.write(row)
    return buf.getvalue()


@dataclass
class Table:
    columns: list[str]
    rows: list[dict]

    def to_csv(self) -> str:
        return render_csv(self.columns, self.rows)

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]


# ---------------------------------------------------------------------------
# model


MODEL_GROUP_COLUMNS = {
    "cw": ["cw_min"],
    "tau": ["tau"],
    "pfail": ["p_fail", "p_coll", "p_err"],
    "throughput": ["throughput_mbps"],
    "delay": ["delay_us", "deadline_us"],
    "airtime": ["airtime", "airtime_success", "airtime_collision"],
}
MODEL_ORDER = ("cw", "tau", "pfail", "throughput", "delay", "airtime")


def model_columns(outputs) -> list[str]:
    cols = ["ac", "n"]
    for g in MODEL_ORDER:
        if g in outputs:
            cols += MODEL_GROUP_COLUMNS[g]
    return cols


def cmd_model(sc: Scenario) -> Table:
    """Analytic operating point at the configured CW_min, one row per AC."""
    cfg = sc.config
    tau = analytics.tau_from_cwmin(cfg)
    probs = analytics.slot_probabilities(cfg, tau)
    s = analytics.throughput(cfg, tau)
    D = analytics.average_delay(cfg, tau)
    air = analytics.airtimes(cfg, tau)
    rows = []
    for i, c in enumerate(cfg.classes):
        on = c.n > 0
        rows.append({
            "ac": c.name, "n": c.n, "cw_min": c.cw_min, "tau": tau[i],
            "p_fail": probs.p_fail[i] if on else None,
            "p_coll": probs.p_coll_cond[i] if on else None,
            "p_err": probs.p_err[i],
            "throughput_mbps": s[i], "delay_us": D[i] if on else None, "deadline_us": c.d,
            "airtime": air.total[i], "airtime_success": air.success[i],
            "airtime_collision": air.collision[i],
        })
    return Table(model_columns(sc.outputs), rows)


# ---------------------------------------------------------------------------
# optimize / sweep


OPT_GROUP_PREFIX = {
    "tau": ["tau"],
    "cw": ["cw"],
    "pfail": ["pfail"],
    "throughput": ["throughput"],
    "delay": ["delay"],
    "airtime": ["airtime"],
}
OPT_ORDER = ("tau", "cw", "pfail", "throughput", "delay", "airtime")
OPT_SUMMARY = ["utility", "airtime_sum", "kkt_residual", "dual_iterations"]


def optimize_columns(names, outputs) -> list[str]:
    cols = list(OPT_SUMMARY)
    for g in OPT_ORDER:
        if g in outputs:
            for prefix in OPT_GROUP_PREFIX[g]:
                cols += [f"{prefix}_{a}" for a in names]
    cols += [f"lambda_{a}" for a in names]
    return cols


def _point_row(names, pt: optimizer.OperatingPoint) -> dict:
    row = {"utility": pt.utility, "airtime_sum": pt.airtime_sum,
           "kkt_residual": pt.kkt_residual, "dual_iterations": pt.dual_iterations}
    for i, a in enumerate(names):
        on = pt.n[i] > 0
        row[f"tau_{a}"] = pt.tau_star[i]
        row[f"cw_{a}"] = pt.cw_min_star[i] if on else None
        row[f"pfail_{a}"] = pt.p_fail_star[i]
        row[f"throughput_{a}"] = pt.throughputs[i]
        row[f"delay_{a}"] = pt.delays[i]
        row[f"airtime_{a}"] = pt.airtimes[i]
        row[f"lambda_{a}"] = pt.multipliers[i] if on else None
    return row


def cmd_optimize(sc: Scenario) -> Table:
    """Delay-constrained PF optimum as a single row."""
    pt = optimizer.solve(sc.config)
    names = sc.config.names
    return Table(optimize_columns(names, sc.outputs), [_point_row(names, pt)])


def apply_parameter(cfg: NetworkConfig, parameter: str, value: float) -> NetworkConfig:
    ac, _, fld = parameter.partition(".")
    if fld == "n":
        if not float(value).is_integer():
            raise ConfigError(f"n must be an integer, got {value}", field="sweep.values")
        value = int(value)
    return cfg.replace_class(ac, **{fld: value})


def _sweep_point(args):
    cfg, parameter, value, sweep, seed, names, outputs = args
    row = {"parameter": parameter, "value": value, "error": None}
    try:
        c = apply_parameter(cfg, parameter, value)
        pt = optimizer.solve(c)
        row.update(_point_row(names, pt))
        if sweep.simulate:
            res = simulator.run(c, pt.cw_min_star, sweep.sim_duration, seed)
            est = simulator.estimate_pfail(res)
            for i, a in enumerate(names):
                row[f"sim_throughput_{a}"] = res.throughput[i] if c.classes[i].n else None
                row[f"sim_pfail_{a}"] = est[i]
    except EdcaError as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def sweep_columns(names, outputs, simulate: bool) -> list[str]:
    cols = ["point", "parameter", "value", "error"] + optimize_columns(names, outputs)
    if simulate:
        cols += [f"sim_throughput_{a}" for a in names] + [f"sim_pfail_{a}" for a in names]
    return cols


def cmd_sweep(sc: Scenario, jobs: int = 1) -> Table:
    """Optimiser (and optionally simulator) over the sweep grid, one row per point.

    Points are independent; with ``jobs > 1`` they run in worker processes and
    are reassembled in grid order, so the output does not depend on ``jobs``.
    """
    if sc.sweep is None:
        raise ConfigError("scenario has no sweep section", field="sweep")
    names = sc.config.names
    work = [(sc.config, sc.sweep.parameter, v, sc.sweep, sc.seed, names, sc.outputs)
            for v in sc.sweep.values]
    if jobs > 1 and len(work) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_point, work))
    else:
        rows = [_sweep_point(w) for w in work]
    for k, row in enumerate(rows):
        row["point"] = k
    return Table(sweep_columns(names, sc.outputs, sc.sweep.simulate), rows)


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class Segment:
    """Controller design for one stretch of constant membership and parameters."""

    index: int
    start_beacon: int
    config: NetworkConfig
    point: optimizer.OperatingPoint
    model: control.LinearModel | None
    state: control.ControllerState | None

    @property
    def mask(self) -> np.ndarray:
        return self.config.active


def record_columns(names) -> list[str]:
    cols = ["beacon", "time_s", "segment"]
    for prefix in ("n", "cw", "pfail", "pfail_window", "ref", "throughput",
                   "throughput_window", "throughput_mean"):
        cols += [f"{prefix}_{a}" for a in names]
    return cols


SUMMARY_COLUMNS = ["segment", "start_s", "ac", "n", "cw_star", "pfail_star", "throughput_star",
                   "time_to_band_beacons", "in_band_fraction", "steady_state_error",
                   "mean_throughput", "throughput_rel_error"]


def _apply_event(cfg: NetworkConfig, ev: Event) -> NetworkConfig:
    c = cfg.classes[cfg.index(ev.ac)]
    if ev.action == "add":
        return cfg.replace_class(ev.ac, n=c.n + 1)
    if ev.action == "remove":
        return cfg.replace_class(ev.ac, n=c.n - 1)
    return cfg.replace_class(ev.ac, **{ev.field: ev.value})


def design_segment(cfg: NetworkConfig, settings: ControllerSettings, index: int,
                   start_beacon: int) -> Segment:
    """Optimiser, linearisation and LQI gain for the current network."""
    pt = optimizer.solve(cfg, cw_floor=settings.cw_floor)
    model = state = None
    if settings.enabled:
        model = control.jacobian(cfg, pt.cw_min_star, tau_star=pt.tau_star)
        Q, R = settings.weights(model.N)
        state = control.lqi_gain(model, Q, R, T_s=cfg.beacon)
    return Segment(index, start_beacon, cfg, pt, model, state)


class _AnalyticNetwork:
    """Analytic stand-in for the simulator with the same beacon interface."""

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        self.plant = None
        self.index = 0

    def reconfigure(self, cfg: NetworkConfig, cw_now, tau_star):
        mask = cfg.active
        tau0 = np.asarray(tau_star, dtype=float).copy()
        cw0 = np.asarray(cw_now, dtype=float).copy()
        if self.plant is not None:
            old = np.zeros(self.cfg.N)
            old[self.plant.mask] = self.plant.tau
            keep = mask & self.plant_mask_full
            tau0[keep] = old[keep]
        self.cfg = cfg
        self.plant = control.AnalyticPlant(cfg, mask, cw0[mask], tau0[mask])
        self.plant_mask_full = mask

    def window(self, cw) -> simulator.BeaconMeasurement:
        cw = np.asarray(cw, dtype=float)
        mask = self.plant.mask
        pf = self.plant(cw[mask])
        tau = np.zeros(self.cfg.N)
        tau[mask] = self.plant.tau
        s = analytics.throughput(self.cfg, tau)
        full = [None] * self.cfg.N
        for k, i in enumerate(np.flatnonzero(mask)):
            full[i] = float(pf[k])
        n = self.cfg.n.astype(int)
        beacon = self.cfg.beacon
        m = simulator.BeaconMeasurement(self.index, self.index * beacon, (self.index + 1) * beacon,
                                        full, np.where(n > 0, s, np.nan), n,
                                        np.zeros(self.cfg.N, dtype=int),
                                        np.zeros(self.cfg.N, dtype=int))
        self.index += 1
        return m


@dataclass
class ClosedLoopResult:
    records: Table
    summary: Table
    segments: list[Segment]


def _pooled(history: list[simulator.BeaconMeasurement], i: int, window: int, analytic: bool):
    """Trailing-window estimate: pooled retry counts (simulator) or mean (analytic)."""
    recent = history[-window:]
    if analytic:
        vals = [h.pfail[i] for h in recent if h.pfail[i] is not None]
        return float(np.mean(vals)) if vals else None
    r0 = sum(int(h.retry0[i]) for h in recent)
    r1 = sum(int(h.retry1[i]) for h in recent)
    return r1 / (r0 + r1) if r0 + r1 > 0 else None


def cmd_closed_loop(sc: Scenario, *, seed: int | None = None, duration: float | None = None,
                    stream=None) -> ClosedLoopResult:
    """Optimiser -> LQI controller -> plant, one controller step per beacon.

    ``stream`` receives the per-beacon record CSV row by row, so a partial
    file survives an aborted run.
    """
    settings = sc.controller
    seed = sc.seed if seed is None else seed
    duration = sc.duration if duration is None else duration
    cfg = sc.config
    names = cfg.names
    beacon = cfg.beacon
    total = int(math.floor(duration / beacon + 1e-9))
    if total < 1:
        raise ConfigError(f"duration must cover at least one beacon ({beacon} us)", field="duration")
    event_beacons = [(int(math.ceil(ev.at / beacon - 1e-9)), ev) for ev in sc.events]
    analytic = settings.plant == "analytic"

    seg = design_segment(cfg, settings, 0, 0)
    segments = [seg]
    cw = np.where(cfg.active, seg.point.cw_min_star, cfg.cw_min)
    if analytic:
        net = _AnalyticNetwork(cfg)
        net.reconfigure(cfg, cw, seg.point.tau_star)
    else:
        net = simulator.EdcaSimulator(cfg, cw, seed)

    columns = record_columns(names)
    writer = CsvWriter(stream, columns) if stream is not None else None
    rows, history = [], []
    thr_sum = np.zeros(cfg.N)
    thr_cnt = np.zeros(cfg.N)
    pending = list(event_beacons)
    for k in range(total):
        changed = False
        while pending and pending[0][0] <= k:
            _, ev = pending.pop(0)
            new_cfg = _apply_event(cfg, ev)
            if not analytic:
                if ev.action == "add":
                    net.add_station(ev.ac)
                elif ev.action == "remove":
                    net.remove_station(ev.ac)
                elif ev.field == "p":
                    net.set_error_rate(ev.ac, ev.value)
            cfg = new_cfg
            changed = True
        if changed:
            seg = design_segment(cfg, settings, len(segments), k)
            segments.append(seg)
            cw = np.where(cfg.active, seg.point.cw_min_star, cw)
            if analytic:
                net.reconfigure(cfg, cw, seg.point.tau_star)
            history = []
            thr_sum[:] = 0.0
            thr_cnt[:] = 0.0
        meas = net.window(cw) if analytic else net.run_beacon_window(cw)
        history.append(meas)
        mask = seg.mask
        row = {"beacon": k, "time_s": (k + 1) * beacon * 1e-6, "segment": seg.index}
        window_pf = [None] * cfg.N
        for i, a in enumerate(names):
            on = bool(mask[i])
            row[f"n_{a}"] = int(meas.n[i])
            row[f"cw_{a}"] = cw[i]
            row[f"pfail_{a}"] = meas.pfail[i] if on else None
            if on:
                window_pf[i] = _pooled(history, i, settings.window, analytic)
                row[f"pfail_window_{a}"] = window_pf[i]
                row[f"ref_{a}"] = seg.point.p_fail_star[i]
                thr = meas.throughput[i]
                row[f"throughput_{a}"] = thr
                row[f"throughput_window_{a}"] = float(np.nanmean(
                    [h.throughput[i] for h in history[-settings.window:]]))
                thr_sum[i] += thr
                thr_cnt[i] += 1
                row[f"throughput_mean_{a}"] = thr_sum[i] / thr_cnt[i]
        rows.append(row)
        if writer is not None:
            writer.write(row)
        if seg.state is not None:
            source = window_pf if settings.measurement == "window" else meas.pfail
            y = [source[i] for i in np.flatnonzero(mask)]
            new = control.step(seg.state, seg.model, y)
            cw = cw.copy()
            cw[mask] = new
    summary = summarize(rows, segments, names, total, beacon, settings.band)
    return ClosedLoopResult(Table(columns, rows), summary, segments)


def summarize(rows, segments, names, total, beacon, band) -> Table:
    """Per segment and AC: time to enter the band, tracking error, throughput error.

    Time to band is the first beacon (counted from the segment start) whose
    trailing-window estimate lies within ``band`` of p^F*. Tracking error and
    mean throughput are averaged from that beacon to the segment end, or over
    the second half of the segment when the band is never reached.
    """
    out = []
    for j, seg in enumerate(segments):
        end = segments[j + 1].start_beacon if j + 1 < len(segments) else total
        seg_rows = rows[seg.start_beacon:end]
        for i, a in enumerate(names):
            if not seg.mask[i]:
                continue
            ref = float(seg.point.p_fail_star[i])
            est = [r.get(f"pfail_window_{a}") for r in seg_rows]
            inside = [e is not None and abs(e - ref) <= band for e in est]
            first = next((q for q, ok in enumerate(inside) if ok), None)
            tail = slice(first, None) if first is not None else slice(len(seg_rows) // 2, None)
            errs = [abs(e - ref) for e in est[tail] if e is not None]
            thr = [r[f"throughput_window_{a}"] for r in seg_rows[tail]]
            star = float(seg.point.throughputs[i])
            mean_thr = float(np.mean(thr)) if thr else None
            out.append({
                "segment": seg.index, "start_s": seg.start_beacon * beacon * 1e-6, "ac": a,
                "n": seg.config.classes[i].n, "cw_star": seg.point.cw_min_star[i],
                "pfail_star": ref, "throughput_star": star,
                "time_to_band_beacons": first,
                "in_band_fraction": float(np.mean(inside[tail])) if seg_rows else None,
                "steady_state_error": float(np.mean(errs)) if errs else None,
                "mean_throughput": mean_thr,
                "throughput_rel_error": abs(mean_thr - star) / star if mean_thr is not None else None,
            })
    return Table(list(SUMMARY_COLUMNS), out)
