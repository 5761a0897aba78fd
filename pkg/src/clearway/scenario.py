"""Scenario files: network + demand + emergency dispatch + training config.

A scenario is a TOML document with four sections.  Field names are part
of the public contract (the README documents them); `load_scenario` and
`dump_scenario` round-trip losslessly after one normalization pass.

    name = "grid3x3"

    [network]
    kind = "grid"                 # or "custom"
    rows = 3
    cols = 3
    link_length_m = 200.0
    lane_count = 2
    # lane_capacity = 26          # optional, default floor(length/7.5)
    free_flow_speed_ms = 6.0
    emv_free_flow_speed_ms = 12.0

    [[network.ec]]                # optional emergency-capacity overrides
    tail = 1
    head = 2
    coefficient = 0.2

    [[flows]]                     # explicit OD stream ...
    origin = 0
    destination = 5
    rate_veh_per_lane_hr = 200.0
    start_s = 0.0
    end_s = 400.0

    [[flows]]                     # ... or a random border-to-border stream
    random_od = true
    rate_veh_per_lane_hr = 160.0
    start_s = 0.0
    end_s = 1200.0

    [emv]
    origin = 0
    destination = 8
    dispatch_s = 600.0

    [sim]      # optional overrides, defaults shown in SimConfig
    [train]    # optional overrides, defaults shown in TrainConfig

Custom networks replace rows/cols with an explicit directed edge list:

    [network]
    kind = "custom"
    n_nodes = 16

    [[network.links]]
    tail = 0
    head = 1
    length_m = 180.0
    lane_count = 2
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .net import Intersection, Link, Network, border_nodes, build_grid, default_lane_capacity


class ScenarioError(ValueError):
    """Schema or semantic violation in a scenario file; names the field."""


@dataclass(slots=True)
class LinkRow:
    tail: int
    head: int
    length_m: float
    lane_count: int
    lane_capacity: int | None = None
    ec_coefficient: float = 0.0


@dataclass(slots=True)
class NetworkSpec:
    kind: str = "grid"
    rows: int = 3
    cols: int = 3
    link_length_m: float = 200.0
    lane_count: int = 2
    lane_capacity: int | None = None
    free_flow_speed_ms: float = 6.0
    emv_free_flow_speed_ms: float = 12.0
    ec: dict[tuple[int, int], float] = field(default_factory=dict)
    n_nodes: int = 0  # custom only
    links: list[LinkRow] = field(default_factory=list)  # custom only


@dataclass(slots=True)
class FlowSpec:
    rate_veh_per_lane_hr: float
    start_s: float
    end_s: float
    origin: int | None = None
    destination: int | None = None
    random_od: bool = False


@dataclass(slots=True)
class EmvSpec:
    origin: int
    destination: int
    dispatch_s: float


@dataclass(slots=True)
class SimConfig:
    horizon_s: float = 1200.0
    mdp_step_s: float = 5.0
    sub_step_s: float = 1.0
    saturation_discharge_veh_s: float = 0.5
    fixed_time_split_s: float = 5.0


@dataclass(slots=True)
class TrainConfig:
    gamma: float = 0.99
    spatial_alpha: float = 0.90
    entropy_coef: float = 0.01
    lr: float = 1e-3
    batch_steps: int = 128
    fc_obs_units: int = 128
    fc_fp_units: int = 64
    lstm_units: int = 64
    episodes: int = 200
    init_std: float = 0.1
    grad_clip: float = 40.0
    beta: float = 0.5


@dataclass(slots=True)
class Scenario:
    name: str
    network: NetworkSpec
    flows: list[FlowSpec]
    emv: EmvSpec
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def build_network(self) -> Network:
        return build_network(self.network)

    def to_toml(self) -> str:
        return _dump_toml(_scenario_to_doc(self))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_toml().encode("utf-8")).hexdigest()


# -- network construction --------------------------------------------


def build_network(spec: NetworkSpec) -> Network:
    if spec.kind == "grid":
        return build_grid(
            spec.rows,
            spec.cols,
            link_length_m=spec.link_length_m,
            lane_count=spec.lane_count,
            lane_capacity=spec.lane_capacity,
            free_flow_speed=spec.free_flow_speed_ms,
            emv_free_flow_speed=spec.emv_free_flow_speed_ms,
            ec_coefficients=spec.ec or None,
        )
    if spec.kind != "custom":
        raise ScenarioError(f"[network] kind: unknown kind {spec.kind!r}")
    return _build_custom(spec)


def _build_custom(spec: NetworkSpec) -> Network:
    n = spec.n_nodes
    if n < 2:
        raise ScenarioError("[network] n_nodes: custom network needs >= 2 nodes")
    neighbor_sets: list[set[int]] = [set() for _ in range(n)]
    for row in spec.links:
        for node in (row.tail, row.head):
            if not 0 <= node < n:
                raise ScenarioError(f"[network.links] node {node} out of range 0..{n - 1}")
        neighbor_sets[row.tail].add(row.head)
        neighbor_sets[row.head].add(row.tail)
    intersections = []
    for i in range(n):
        nbrs = sorted(neighbor_sets[i])
        if len(nbrs) > 4:
            raise ScenarioError(f"[network.links] node {i} has {len(nbrs)} neighbors (max 4)")
        # Synthetic maps carry no geometry; ports go to sorted neighbors.
        intersections.append(Intersection(i, {p: nbr for p, nbr in enumerate(nbrs)}))
    links = []
    for row in spec.links:
        cap = row.lane_capacity
        if cap is None:
            cap = default_lane_capacity(row.length_m)
        links.append(
            Link(
                index=len(links),
                tail=row.tail,
                head=row.head,
                length_m=row.length_m,
                lane_count=row.lane_count,
                lane_capacity=cap,
                free_flow_speed=spec.free_flow_speed_ms,
                emv_free_flow_speed=spec.emv_free_flow_speed_ms,
                ec_coefficient=row.ec_coefficient,
            )
        )
    return Network(intersections, links)


# -- load / validate ---------------------------------------------------


def load_scenario(path: str | Path) -> Scenario:
    raw = Path(path).read_bytes()
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:  # carries line/column info
        raise ScenarioError(f"{path}: {exc}") from exc
    return scenario_from_doc(doc)


def builtin_scenario_names() -> list[str]:
    from importlib import resources

    folder = resources.files(__package__) / "scenarios"
    return sorted(p.name[: -len(".toml")] for p in folder.iterdir() if p.name.endswith(".toml"))


def resolve_scenario(name_or_path: str) -> Scenario:
    """Load a scenario from a file path or a shipped scenario name."""
    p = Path(name_or_path)
    if p.exists():
        return load_scenario(p)
    from importlib import resources

    res = resources.files(__package__) / "scenarios" / f"{name_or_path}.toml"
    try:
        text = res.read_text(encoding="utf-8")
    except (FileNotFoundError, OSError):
        known = ", ".join(builtin_scenario_names())
        raise ScenarioError(
            f"scenario {name_or_path!r} is neither a file nor a shipped scenario ({known})"
        ) from None
    return scenario_from_doc(tomllib.loads(text))


def scenario_from_doc(doc: dict) -> Scenario:
    name = _req(doc, "name", str)
    net = _parse_network(_req(doc, "network", dict))
    flows = [_parse_flow(i, f) for i, f in enumerate(_req(doc, "flows", list))]
    emv = _parse_emv(_req(doc, "emv", dict))
    sim = _parse_into(SimConfig, doc.get("sim", {}), "sim")
    train = _parse_into(TrainConfig, doc.get("train", {}), "train")
    sc = Scenario(name=name, network=net, flows=flows, emv=emv, sim=sim, train=train)
    validate_scenario(sc)
    return sc


def validate_scenario(sc: Scenario) -> Network:
    """Full semantic validation; returns the built network."""
    network = sc.build_network()
    n = network.n_nodes
    border = set(border_nodes(network))
    for i, f in enumerate(sc.flows):
        where = f"[[flows]] #{i}"
        if f.end_s <= f.start_s:
            raise ScenarioError(f"{where} end_s: must exceed start_s")
        if f.rate_veh_per_lane_hr < 0:
            raise ScenarioError(f"{where} rate_veh_per_lane_hr: negative")
        if f.random_od:
            if f.origin is not None or f.destination is not None:
                raise ScenarioError(f"{where}: random_od rows must omit origin/destination")
            if len(border) < 2:
                raise ScenarioError(f"{where}: random_od needs >= 2 border intersections")
        else:
            if f.origin is None or f.destination is None:
                raise ScenarioError(f"{where}: origin and destination required")
            for fld, v in (("origin", f.origin), ("destination", f.destination)):
                if not 0 <= v < n:
                    raise ScenarioError(f"{where} {fld}: {v} out of range")
            if f.origin == f.destination:
                raise ScenarioError(f"{where}: origin equals destination")
    for fld, v in (("origin", sc.emv.origin), ("destination", sc.emv.destination)):
        if not 0 <= v < n:
            raise ScenarioError(f"[emv] {fld}: {v} out of range")
    if not _reachable(network, sc.emv.origin, sc.emv.destination):
        raise ScenarioError("[emv] destination: unreachable from origin")
    if sc.emv.dispatch_s < 0 or sc.emv.dispatch_s >= sc.sim.horizon_s:
        raise ScenarioError("[emv] dispatch_s: outside [0, horizon)")
    if sc.sim.mdp_step_s <= 0 or sc.sim.sub_step_s <= 0:
        raise ScenarioError("[sim] step sizes must be positive")
    ratio = sc.sim.mdp_step_s / sc.sim.sub_step_s
    if abs(ratio - round(ratio)) > 1e-9:
        raise ScenarioError("[sim] mdp_step_s must be a multiple of sub_step_s")
    return network


def _reachable(network: Network, a: int, b: int) -> bool:
    seen = {a}
    stack = [a]
    while stack:
        u = stack.pop()
        if u == b:
            return True
        for lk in network.out_links(u):
            v = network.links[lk].head
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return False


def _req(doc: dict, key: str, typ: type):
    if key not in doc:
        raise ScenarioError(f"missing required field [{key}]")
    val = doc[key]
    if typ is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, typ):
        raise ScenarioError(f"[{key}]: expected {typ.__name__}, got {type(val).__name__}")
    return val


def _parse_network(tbl: dict) -> NetworkSpec:
    kind = tbl.get("kind", "grid")
    spec = NetworkSpec(kind=kind)
    if kind == "grid":
        spec.rows = int(_req(tbl, "rows", int))
        spec.cols = int(_req(tbl, "cols", int))
    elif kind == "custom":
        spec.n_nodes = int(_req(tbl, "n_nodes", int))
        for i, row in enumerate(tbl.get("links", [])):
            try:
                spec.links.append(
                    LinkRow(
                        tail=int(row["tail"]),
                        head=int(row["head"]),
                        length_m=float(row["length_m"]),
                        lane_count=int(row["lane_count"]),
                        lane_capacity=(
                            int(row["lane_capacity"]) if "lane_capacity" in row else None
                        ),
                        ec_coefficient=float(row.get("ec_coefficient", 0.0)),
                    )
                )
            except KeyError as exc:
                raise ScenarioError(f"[[network.links]] #{i}: missing {exc.args[0]}") from exc
    else:
        raise ScenarioError(f"[network] kind: unknown kind {kind!r}")
    for key in ("link_length_m", "free_flow_speed_ms", "emv_free_flow_speed_ms"):
        if key in tbl:
            setattr(spec, key, float(tbl[key]))
    if "lane_count" in tbl:
        spec.lane_count = int(tbl["lane_count"])
    if "lane_capacity" in tbl:
        spec.lane_capacity = int(tbl["lane_capacity"])
    for i, row in enumerate(tbl.get("ec", [])):
        try:
            spec.ec[(int(row["tail"]), int(row["head"]))] = float(row["coefficient"])
        except KeyError as exc:
            raise ScenarioError(f"[[network.ec]] #{i}: missing {exc.args[0]}") from exc
    return spec


def _parse_flow(i: int, row) -> FlowSpec:
    if not isinstance(row, dict):
        raise ScenarioError(f"[[flows]] #{i}: expected a table")
    try:
        flow = FlowSpec(
            rate_veh_per_lane_hr=float(row["rate_veh_per_lane_hr"]),
            start_s=float(row["start_s"]),
            end_s=float(row["end_s"]),
            origin=int(row["origin"]) if "origin" in row else None,
            destination=int(row["destination"]) if "destination" in row else None,
            random_od=bool(row.get("random_od", False)),
        )
    except KeyError as exc:
        raise ScenarioError(f"[[flows]] #{i}: missing {exc.args[0]}") from exc
    return flow


def _parse_emv(tbl: dict) -> EmvSpec:
    try:
        return EmvSpec(
            origin=int(tbl["origin"]),
            destination=int(tbl["destination"]),
            dispatch_s=float(tbl["dispatch_s"]),
        )
    except KeyError as exc:
        raise ScenarioError(f"[emv]: missing {exc.args[0]}") from exc


def _parse_into(cls, tbl: dict, section: str):
    cfg = cls()
    valid = set(cls.__dataclass_fields__)
    for key, val in tbl.items():
        if key not in valid:
            raise ScenarioError(f"[{section}] {key}: unknown field")
        cur = getattr(cfg, key)
        setattr(cfg, key, type(cur)(val))
    return cfg


# -- dump ------------------------------------------------------------


def dump_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(sc.to_toml(), encoding="utf-8")


def _scenario_to_doc(sc: Scenario) -> dict:
    net: dict = {"kind": sc.network.kind}
    if sc.network.kind == "grid":
        net["rows"] = sc.network.rows
        net["cols"] = sc.network.cols
    else:
        net["n_nodes"] = sc.network.n_nodes
    net["link_length_m"] = sc.network.link_length_m
    net["lane_count"] = sc.network.lane_count
    if sc.network.lane_capacity is not None:
        net["lane_capacity"] = sc.network.lane_capacity
    net["free_flow_speed_ms"] = sc.network.free_flow_speed_ms
    net["emv_free_flow_speed_ms"] = sc.network.emv_free_flow_speed_ms
    if sc.network.ec:
        net["ec"] = [
            {"tail": t, "head": h, "coefficient": c}
            for (t, h), c in sorted(sc.network.ec.items())
        ]
    if sc.network.kind == "custom":
        net["links"] = [
            {k: v for k, v in asdict(row).items() if v is not None}
            for row in sc.network.links
        ]
    flows = []
    for f in sc.flows:
        row: dict = {}
        if f.random_od:
            row["random_od"] = True
        else:
            row["origin"] = f.origin
            row["destination"] = f.destination
        row["rate_veh_per_lane_hr"] = f.rate_veh_per_lane_hr
        row["start_s"] = f.start_s
        row["end_s"] = f.end_s
        flows.append(row)
    return {
        "name": sc.name,
        "network": net,
        "flows": flows,
        "emv": asdict(sc.emv),
        "sim": asdict(sc.sim),
        "train": asdict(sc.train),
    }


def _toml_scalar(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, (int, float)):
        return repr(val)
    if isinstance(val, str):
        escaped = val.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    raise TypeError(f"cannot serialize {type(val).__name__}")


def _dump_toml(doc: dict) -> str:
    """Minimal TOML writer: scalars, tables, arrays of tables."""
    out: list[str] = []
    for key, val in doc.items():
        if not isinstance(val, (dict, list)):
            out.append(f"{key} = {_toml_scalar(val)}")
    for key, val in doc.items():
        if isinstance(val, dict):
            out.append("")
            out.append(f"[{key}]")
            _dump_table(out, key, val)
        elif isinstance(val, list):
            for item in val:
                out.append("")
                out.append(f"[[{key}]]")
                _dump_table(out, key, item)
    return "\n".join(out) + "\n"


def _dump_table(out: list[str], prefix: str, tbl: dict) -> None:
    nested: list[tuple[str, object]] = []
    for key, val in tbl.items():
        if isinstance(val, (dict, list)):
            nested.append((key, val))
        else:
            out.append(f"{key} = {_toml_scalar(val)}")
    for key, val in nested:
        path = f"{prefix}.{key}"
        if isinstance(val, dict):
            out.append("")
            out.append(f"[{path}]")
            _dump_table(out, path, val)
        else:
            for item in val:
                out.append("")
                out.append(f"[[{path}]]")
                _dump_table(out, path, item)


# -- scenario generators ----------------------------------------------


def directional_flows(
    rows: int,
    cols: int,
    base_rate: float,
    peak_rate: float,
    peak_start_s: float,
    peak_end_s: float,
    horizon_s: float,
) -> list[FlowSpec]:
    """North/south border origins feeding east/west border destinations.

    Each origin's per-lane rate is split evenly over its destinations;
    demand is piecewise constant with a peak window in the middle.
    """
    north = [c for c in range(cols)]
    south = [(rows - 1) * cols + c for c in range(cols)]
    west = [r * cols for r in range(rows)]
    east = [r * cols + (cols - 1) for r in range(rows)]
    exits = sorted(set(west + east))
    windows = [
        (0.0, peak_start_s, base_rate),
        (peak_start_s, peak_end_s, peak_rate),
        (peak_end_s, horizon_s, base_rate),
    ]
    flows: list[FlowSpec] = []
    for origin in sorted(set(north + south)):
        dests = [d for d in exits if d != origin]
        for dest in dests:
            for start, end, rate in windows:
                if end > start:
                    flows.append(
                        FlowSpec(
                            rate_veh_per_lane_hr=rate / len(dests),
                            start_s=start,
                            end_s=end,
                            origin=origin,
                            destination=dest,
                        )
                    )
    return flows


def random_od_flows(
    base_rate: float,
    peak_rate: float,
    peak_start_s: float,
    peak_end_s: float,
    horizon_s: float,
) -> list[FlowSpec]:
    windows = [
        (0.0, peak_start_s, base_rate),
        (peak_start_s, peak_end_s, peak_rate),
        (peak_end_s, horizon_s, base_rate),
    ]
    return [
        FlowSpec(rate_veh_per_lane_hr=rate, start_s=start, end_s=end, random_od=True)
        for start, end, rate in windows
        if end > start
    ]


def eastern_column_ec(rows: int, cols: int, coefficient: float) -> dict[tuple[int, int], float]:
    """Emergency-capacity overrides on every link touching the east column."""
    east = {r * cols + (cols - 1) for r in range(rows)}
    ec: dict[tuple[int, int], float] = {}
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            for dr, dc in ((-1, 0), (0, 1), (1, 0), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    j = rr * cols + cc
                    if i in east or j in east:
                        ec[(i, j)] = coefficient
    return ec
