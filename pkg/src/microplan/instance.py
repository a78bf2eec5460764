"""Planning-instance domain types, file ingestion, and synthetic load generation.

A planning instance is a directory holding ``network.json`` (buses, lines,
candidate resources, penalties) and one or more ``*.csv`` load files with
columns ``step,bus,p_mw,q_mvar``.  All electrical quantities are stored
per-unit on the instance's MVA base; costs stay in dollars and energy in
per-unit hours.  Instances are immutable after construction and safe to
share across concurrent solver runs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import networkx as nx
import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

# Reactive fraction of synthetic real load (no reactive shape is published
# for the reference profiles, so a fixed power factor is used).
SYNTH_REACTIVE_FRACTION = 0.3


class InstanceError(ValueError):
    """Raised for malformed or inconsistent instance data.

    Carries a ``location`` string (file, section, field) so callers can
    point at the offending entry.
    """

    def __init__(self, message, location=""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


@dataclass(frozen=True)
class Bus:
    id: str
    v_min: float  # squared voltage lower bound, pu^2
    v_max: float  # squared voltage upper bound, pu^2
    max_batteries: int = 0
    max_generators: int = 0

    def __post_init__(self):
        if self.v_min > self.v_max:
            raise InstanceError("v_min exceeds v_max", f"bus {self.id}")
        if self.max_batteries < 0 or self.max_generators < 0:
            raise InstanceError("candidate counts must be nonnegative", f"bus {self.id}")


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    r: float  # pu
    x: float  # pu
    s_max: float  # thermal limit, pu on the system base

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise InstanceError("line endpoints coincide", f"line {self.id}")
        if self.r < 0 or self.x < 0:
            raise InstanceError("negative impedance", f"line {self.id}")
        if self.s_max <= 0:
            raise InstanceError("thermal limit must be positive", f"line {self.id}")


@dataclass(frozen=True)
class BatterySpec:
    id: str
    bus: str
    fixed_cost: float      # $ if built
    capacity_cost: float   # $/MVA of installed apparent-power capacity
    max_power: float       # installable apparent-power cap, pu
    max_energy: float      # energy capacity, pu.h
    eta_ch: float
    eta_dis: float
    initial_soc: float = 0.0  # pu.h
    p_min: float = 0.0     # pu (charging is negative)
    p_max: float = 0.0     # pu
    q_min: float = 0.0
    q_max: float = 0.0

    def __post_init__(self):
        loc = f"battery {self.id}"
        if not (0.0 < self.eta_ch <= 1.0) or not (0.0 < self.eta_dis <= 1.0):
            raise InstanceError("efficiencies must lie in (0, 1]", loc)
        if self.max_power <= 0:
            raise InstanceError("max_power must be positive", loc)
        if not (0.0 <= self.initial_soc <= self.max_energy):
            raise InstanceError("initial_soc outside [0, max_energy]", loc)
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise InstanceError("inverted generation limits", loc)


@dataclass(frozen=True)
class GeneratorSpec:
    id: str
    bus: str
    fixed_cost: float           # $ if built
    cost_coeffs: tuple          # (no-load $/step, $/MW, $/MW^2) on fuel-side power
    min_up: int                 # steps
    min_down: int               # steps
    ramp_up: float              # pu/step, on delivered power
    ramp_down: float            # pu/step
    efficiency: float           # delivered = efficiency * fuel-side power
    p_min: float                # pu, fuel-side lower limit when committed
    p_max: float                # pu, fuel-side upper limit
    q_min: float = 0.0
    q_max: float = 0.0

    def __post_init__(self):
        loc = f"generator {self.id}"
        if len(self.cost_coeffs) != 3:
            raise InstanceError("cost_coeffs must be (c0, c1, c2)", loc)
        if self.cost_coeffs[2] < 0:
            raise InstanceError("quadratic cost coefficient must be nonnegative", loc)
        if self.min_up < 1 or self.min_down < 1:
            raise InstanceError("min up/down times must be >= 1 step", loc)
        if self.ramp_up < 0 or self.ramp_down < 0:
            raise InstanceError("ramp limits must be nonnegative", loc)
        if not (0.0 < self.efficiency <= 1.0):
            raise InstanceError("efficiency must lie in (0, 1]", loc)
        if self.p_min > self.p_max:
            raise InstanceError("inverted generation limits", loc)

    @property
    def history_depth(self):
        """Steps of start/stop history a window boundary must carry."""
        return max(self.min_up, self.min_down)


@dataclass(frozen=True)
class NetworkInstance:
    buses: tuple
    lines: tuple
    battery_specs: tuple
    generator_specs: tuple
    shed_penalty: float    # $/MW of unserved real or reactive demand per step
    dt: float              # hours per step
    base_mva: float = 1.0
    slack_bus: str = ""
    grid_connected: bool = False
    name: str = "instance"

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise InstanceError("duplicate bus ids", self.name)
        bus_set = set(ids)
        for ln in self.lines:
            for end in (ln.from_bus, ln.to_bus):
                if end not in bus_set:
                    raise InstanceError(f"references unknown bus {end!r}", f"line {ln.id}")
        for spec in self.battery_specs + self.generator_specs:
            if spec.bus not in bus_set:
                raise InstanceError(f"references unknown bus {spec.bus!r}",
                                    f"candidate {spec.id}")
        seen = set()
        for spec in self.battery_specs + self.generator_specs:
            if spec.id in seen:
                raise InstanceError("duplicate resource id", f"candidate {spec.id}")
            seen.add(spec.id)
        if self.buses and not self.slack_bus:
            object.__setattr__(self, "slack_bus", self.buses[0].id)
        if self.slack_bus and self.slack_bus not in bus_set:
            raise InstanceError(f"slack bus {self.slack_bus!r} not in bus list", self.name)
        if self.dt <= 0:
            raise InstanceError("dt must be positive", self.name)
        if self.base_mva <= 0:
            raise InstanceError("base_mva must be positive", self.name)
        g = self.graph()
        if g.number_of_nodes() > 1 and not nx.is_connected(g):
            comps = [sorted(c) for c in nx.connected_components(g)]
            raise InstanceError(f"graph is disconnected: components {comps}", self.name)

    def graph(self):
        g = nx.Graph()
        g.add_nodes_from(b.id for b in self.buses)
        g.add_edges_from((ln.from_bus, ln.to_bus) for ln in self.lines)
        return g

    def bus_index(self):
        return {b.id: i for i, b in enumerate(self.buses)}

    def batteries_at(self, bus_id):
        return [b for b in self.battery_specs if b.bus == bus_id]

    def generators_at(self, bus_id):
        return [d for d in self.generator_specs if d.bus == bus_id]


@dataclass(frozen=True)
class LoadProfile:
    """Per-bus real/reactive demand series at a fixed step, per-unit."""

    horizon: int
    bus_ids: tuple
    p: np.ndarray  # (horizon, n_buses), pu
    q: np.ndarray  # (horizon, n_buses), pu
    dt: float      # hours

    def __post_init__(self):
        n = len(self.bus_ids)
        if self.p.shape != (self.horizon, n) or self.q.shape != (self.horizon, n):
            raise InstanceError("load array shape does not match horizon/buses")
        if self.horizon and not (np.isfinite(self.p).all() and np.isfinite(self.q).all()):
            raise InstanceError("loads contain non-finite values")

    def window(self, start, end):
        return self.p[start:end], self.q[start:end]


@dataclass(frozen=True)
class RadialReport:
    is_radial: bool
    connected: bool
    cycle: tuple = ()  # one offending cycle as bus ids, if any


def validate_radial(instance: NetworkInstance) -> RadialReport:
    """Diagnostic tree check.  Non-radial instances stay valid; the voltage
    drop relation is imposed per line regardless of topology."""
    g = instance.graph()
    connected = g.number_of_nodes() <= 1 or nx.is_connected(g)
    try:
        cyc = nx.find_cycle(g)
        cycle = tuple(u for u, _ in cyc)
    except nx.NetworkXNoCycle:
        cycle = ()
    is_radial = connected and not cycle and len(instance.lines) == len(instance.buses) - 1 \
        if instance.buses else True
    return RadialReport(is_radial=bool(is_radial), connected=bool(connected), cycle=cycle)


# ---------------------------------------------------------------------------
# file ingestion


def _require(data, key, location):
    if key not in data:
        raise InstanceError(f"missing field {key!r}", location)
    return data[key]


def parse_instance(path) -> NetworkInstance:
    """Read and validate an instance directory (or a ``network.json`` path).

    Raises :class:`InstanceError` with a file/field location for missing
    files, malformed fields, dangling bus references, and disconnected
    graphs.
    """
    path = Path(path)
    net_file = path / "network.json" if path.is_dir() else path
    if not net_file.exists():
        raise InstanceError("file not found", str(net_file))
    try:
        data = json.loads(net_file.read_text())
    except json.JSONDecodeError as exc:
        raise InstanceError(f"invalid JSON: {exc}", str(net_file))

    loc = str(net_file)
    version = _require(data, "format_version", loc)
    if version != FORMAT_VERSION:
        raise InstanceError(f"unsupported format_version {version}", loc)
    base = float(_require(data, "base_mva", loc))
    if base <= 0:
        raise InstanceError("base_mva must be positive", loc)

    buses = []
    for entry in _require(data, "buses", loc):
        bloc = f"{loc}: bus {entry.get('id', '?')}"
        buses.append(Bus(
            id=str(_require(entry, "id", bloc)),
            v_min=float(_require(entry, "v_min", bloc)),
            v_max=float(_require(entry, "v_max", bloc)),
            max_batteries=int(entry.get("max_batteries", 0)),
            max_generators=int(entry.get("max_generators", 0)),
        ))

    lines = []
    for entry in data.get("lines", []):
        lloc = f"{loc}: line {entry.get('id', '?')}"
        lines.append(Line(
            id=str(_require(entry, "id", lloc)),
            from_bus=str(_require(entry, "from_bus", lloc)),
            to_bus=str(_require(entry, "to_bus", lloc)),
            r=float(_require(entry, "r", lloc)),
            x=float(_require(entry, "x", lloc)),
            s_max=float(_require(entry, "s_max_mva", lloc)) / base,
        ))

    batteries = []
    for entry in data.get("batteries", []):
        bloc = f"{loc}: battery {entry.get('id', '?')}"
        batteries.append(BatterySpec(
            id=str(_require(entry, "id", bloc)),
            bus=str(_require(entry, "bus", bloc)),
            fixed_cost=float(_require(entry, "fixed_cost", bloc)),
            capacity_cost=float(_require(entry, "capacity_cost_per_mva", bloc)),
            max_power=float(_require(entry, "max_power_mva", bloc)) / base,
            max_energy=float(_require(entry, "max_energy_mwh", bloc)) / base,
            eta_ch=float(_require(entry, "eta_ch", bloc)),
            eta_dis=float(_require(entry, "eta_dis", bloc)),
            initial_soc=float(entry.get("initial_soc_mwh", 0.0)) / base,
            p_min=float(_require(entry, "p_min_mw", bloc)) / base,
            p_max=float(_require(entry, "p_max_mw", bloc)) / base,
            q_min=float(_require(entry, "q_min_mvar", bloc)) / base,
            q_max=float(_require(entry, "q_max_mvar", bloc)) / base,
        ))

    generators = []
    for entry in data.get("generators", []):
        gloc = f"{loc}: generator {entry.get('id', '?')}"
        coeffs = _require(entry, "cost_coeffs", gloc)
        if not isinstance(coeffs, (list, tuple)) or len(coeffs) != 3:
            raise InstanceError("cost_coeffs must have three entries", gloc)
        generators.append(GeneratorSpec(
            id=str(_require(entry, "id", gloc)),
            bus=str(_require(entry, "bus", gloc)),
            fixed_cost=float(_require(entry, "fixed_cost", gloc)),
            cost_coeffs=tuple(float(c) for c in coeffs),
            min_up=int(_require(entry, "min_up", gloc)),
            min_down=int(_require(entry, "min_down", gloc)),
            ramp_up=float(_require(entry, "ramp_up_mw", gloc)) / base,
            ramp_down=float(_require(entry, "ramp_down_mw", gloc)) / base,
            efficiency=float(_require(entry, "efficiency", gloc)),
            p_min=float(_require(entry, "p_min_mw", gloc)) / base,
            p_max=float(_require(entry, "p_max_mw", gloc)) / base,
            q_min=float(_require(entry, "q_min_mvar", gloc)) / base,
            q_max=float(_require(entry, "q_max_mvar", gloc)) / base,
        ))

    instance = NetworkInstance(
        buses=tuple(buses),
        lines=tuple(lines),
        battery_specs=tuple(batteries),
        generator_specs=tuple(generators),
        shed_penalty=float(_require(data, "shed_penalty", loc)),
        dt=float(_require(data, "dt_hours", loc)),
        base_mva=base,
        slack_bus=str(data.get("slack_bus", "")),
        grid_connected=bool(data.get("grid_connected", False)),
        name=data.get("name", path.name if path.is_dir() else path.stem),
    )

    report = validate_radial(instance)
    if not report.is_radial:
        log.warning("instance %s is not radial (cycle through %s); accepted with "
                    "per-line voltage-drop rows", instance.name, report.cycle)
    for bus in instance.buses:
        if bus.max_batteries == 0 and instance.batteries_at(bus.id):
            log.warning("bus %s lists battery candidates but allows none", bus.id)
        if bus.max_generators == 0 and instance.generators_at(bus.id):
            log.warning("bus %s lists generator candidates but allows none", bus.id)
    return instance


def write_instance(instance: NetworkInstance, path) -> Path:
    """Emit ``network.json`` for `instance`; inverse of :func:`parse_instance`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    base = instance.base_mva
    data = {
        "format_version": FORMAT_VERSION,
        "name": instance.name,
        "base_mva": base,
        "shed_penalty": instance.shed_penalty,
        "dt_hours": instance.dt,
        "slack_bus": instance.slack_bus,
        "grid_connected": instance.grid_connected,
        "buses": [asdict(b) for b in instance.buses],
        "lines": [{
            "id": ln.id, "from_bus": ln.from_bus, "to_bus": ln.to_bus,
            "r": ln.r, "x": ln.x, "s_max_mva": ln.s_max * base,
        } for ln in instance.lines],
        "batteries": [{
            "id": b.id, "bus": b.bus, "fixed_cost": b.fixed_cost,
            "capacity_cost_per_mva": b.capacity_cost,
            "max_power_mva": b.max_power * base,
            "max_energy_mwh": b.max_energy * base,
            "eta_ch": b.eta_ch, "eta_dis": b.eta_dis,
            "initial_soc_mwh": b.initial_soc * base,
            "p_min_mw": b.p_min * base, "p_max_mw": b.p_max * base,
            "q_min_mvar": b.q_min * base, "q_max_mvar": b.q_max * base,
        } for b in instance.battery_specs],
        "generators": [{
            "id": d.id, "bus": d.bus, "fixed_cost": d.fixed_cost,
            "cost_coeffs": list(d.cost_coeffs),
            "min_up": d.min_up, "min_down": d.min_down,
            "ramp_up_mw": d.ramp_up * base, "ramp_down_mw": d.ramp_down * base,
            "efficiency": d.efficiency,
            "p_min_mw": d.p_min * base, "p_max_mw": d.p_max * base,
            "q_min_mvar": d.q_min * base, "q_max_mvar": d.q_max * base,
        } for d in instance.generator_specs],
    }
    out = path / "network.json"
    out.write_text(json.dumps(data, indent=2) + "\n")
    return out


def parse_loads(path, instance: NetworkInstance, dt: float) -> LoadProfile:
    """Read a ``step,bus,p_mw,q_mvar`` CSV into a dense per-unit profile.

    Buses absent from the file default to zero load; every bus present must
    cover the same contiguous step range starting at 0.
    """
    path = Path(path)
    if dt <= 0:
        raise InstanceError("dt must be positive", str(path))
    if not path.exists():
        raise InstanceError("file not found", str(path))
    idx = instance.bus_index()
    series = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        log.warning("load file %s is empty; using a zero-length profile", path)
        n = len(instance.buses)
        z = np.zeros((0, n))
        return LoadProfile(horizon=0, bus_ids=tuple(idx), p=z, q=z.copy(), dt=dt)

    for lineno, row in enumerate(rows, start=2):
        loc = f"{path}:{lineno}"
        try:
            step = int(row["step"])
            bus = str(row["bus"])
            p = float(row["p_mw"])
            q = float(row["q_mvar"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InstanceError(f"malformed row ({exc})", loc)
        if step < 0:
            raise InstanceError("negative step index", loc)
        if bus not in idx:
            raise InstanceError(f"unknown bus {bus!r}", loc)
        series.setdefault(bus, {})[step] = (p, q)

    lengths = {bus: len(steps) for bus, steps in series.items()}
    horizon = max(lengths.values())
    for bus, steps in series.items():
        if len(steps) != horizon or sorted(steps) != list(range(horizon)):
            raise InstanceError(
                f"bus {bus!r} covers {len(steps)} steps, expected 0..{horizon - 1}",
                str(path))

    n = len(instance.buses)
    p = np.zeros((horizon, n))
    q = np.zeros((horizon, n))
    for bus, steps in series.items():
        j = idx[bus]
        for step, (pv, qv) in steps.items():
            p[step, j] = pv / instance.base_mva
            q[step, j] = qv / instance.base_mva
    return LoadProfile(horizon=horizon, bus_ids=tuple(idx), p=p, q=q, dt=dt)


def write_loads(profile: LoadProfile, instance: NetworkInstance, path) -> Path:
    """Emit a loads CSV (MW/MVAr) readable by :func:`parse_loads`."""
    path = Path(path)
    base = instance.base_mva
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "bus", "p_mw", "q_mvar"])
        for t in range(profile.horizon):
            for j, bus in enumerate(profile.bus_ids):
                writer.writerow([t, bus, repr(float(profile.p[t, j] * base)),
                                 repr(float(profile.q[t, j] * base))])
    return path


def synth_load(instance: NetworkInstance, days: int, dt: float, base,
               daily_amplitude: float = 0.4, noise_amplitude: float = 0.05,
               seed: int = 0) -> LoadProfile:
    """Generate a deterministic synthetic profile.

    Per bus: ``base_mw * (1 + daily_amplitude * diurnal(t) + noise_amplitude
    * noise(t))`` clipped at zero, where ``diurnal`` is a 24-hour cosine
    shape peaking mid-day and ``noise`` is seeded white noise.  Reactive
    load is a fixed power-factor fraction of the real load.  `base` is
    either a single MW value applied to every bus or a mapping
    ``bus id -> MW``.
    """
    if days < 1:
        raise InstanceError("days must be >= 1")
    if daily_amplitude < 0 or noise_amplitude < 0:
        raise InstanceError("amplitudes must be nonnegative")
    if dt <= 0:
        raise InstanceError("dt must be positive")

    steps = int(round(days * 24.0 / dt))
    if not math.isclose(steps * dt, days * 24.0, rel_tol=0, abs_tol=1e-9):
        raise InstanceError(f"dt={dt} does not evenly divide {days} days")
    n = len(instance.buses)
    if isinstance(base, dict):
        base_mw = np.array([float(base.get(b.id, 0.0)) for b in instance.buses])
    else:
        base_mw = np.full(n, float(base))

    hours = (np.arange(steps) * dt) % 24.0
    diurnal = -np.cos(2.0 * np.pi * hours / 24.0)  # trough at midnight, peak at noon
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((steps, n))

    shape = 1.0 + daily_amplitude * diurnal[:, None] + noise_amplitude * noise
    p_mw = np.maximum(base_mw[None, :] * shape, 0.0)
    q_mvar = SYNTH_REACTIVE_FRACTION * p_mw
    return LoadProfile(
        horizon=steps,
        bus_ids=tuple(b.id for b in instance.buses),
        p=p_mw / instance.base_mva,
        q=q_mvar / instance.base_mva,
        dt=dt,
    )
