"""Physical datacenter layout: aisles, rows, racks, servers, and their
provisioned cooling/power envelopes.

The hierarchy is datacenter -> aisles -> rows (two per aisle) -> racks ->
servers (8 GPUs each). A topology is immutable after construction and can be
shared freely across concurrent simulation runs. The JSON spec format
round-trips bit-exactly through ``to_dict``/``build_topology``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

GPUS_PER_SERVER = 8

#: Per-GPU-type server characteristics. TDP/idle are whole-server watts.
#: ``cfm_per_pwm`` anchors the fan curve at 840/1105 CFM for 80% PWM.
GPU_SPECS = {
    "A100": {"tdp_w": 6500.0, "idle_w": 1500.0, "cfm_per_pwm": 10.5},
    "H100": {"tdp_w": 10200.0, "idle_w": 2300.0, "cfm_per_pwm": 13.8125},
}


class TopologyError(ValueError):
    """Raised for invalid layout specs: dangling references, bad limits."""


@dataclass(frozen=True)
class Server:
    id: str
    rack: str
    slot: int
    gpu_type: str
    idle_power_w: float
    tdp_w: float
    gpu_count: int = GPUS_PER_SERVER


@dataclass(frozen=True)
class Row:
    id: str
    racks: tuple[str, ...]
    prov_power_w: float


@dataclass(frozen=True)
class Aisle:
    id: str
    rows: tuple[str, str]
    prov_ahu_cfm: float
    ahu_units: int


@dataclass(frozen=True)
class Redundancy:
    ahus_per_aisle: int = 3       # N+1
    ups_count: int = 4
    ups_model: str = "4N/3"       # one UPS failure -> 75% capacity


@dataclass(frozen=True)
class Topology:
    datacenter: str
    delta_t_cooling: float
    redundancy: Redundancy
    aisles: tuple[Aisle, ...]
    rows: tuple[Row, ...]
    servers: tuple[Server, ...]
    # Derived lookups, filled in __post_init__.
    _row_by_id: dict = field(init=False, repr=False, compare=False, default_factory=dict)
    _aisle_by_id: dict = field(init=False, repr=False, compare=False, default_factory=dict)
    _server_by_id: dict = field(init=False, repr=False, compare=False, default_factory=dict)
    _row_of_rack: dict = field(init=False, repr=False, compare=False, default_factory=dict)
    _aisle_of_row: dict = field(init=False, repr=False, compare=False, default_factory=dict)
    _scope_cache: dict = field(init=False, repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        for a in self.aisles:
            self._aisle_by_id[a.id] = a
            for r in a.rows:
                self._aisle_of_row[r] = a.id
        for r in self.rows:
            self._row_by_id[r.id] = r
            for k in r.racks:
                self._row_of_rack[k] = r.id
        for s in self.servers:
            self._server_by_id[s.id] = s

    # -- lookups ----------------------------------------------------------

    def server(self, server_id: str) -> Server:
        try:
            return self._server_by_id[server_id]
        except KeyError:
            raise TopologyError(f"unknown server id {server_id!r}") from None

    def row_of_server(self, server_id: str) -> str:
        return self._row_of_rack[self.server(server_id).rack]

    def aisle_of_server(self, server_id: str) -> str:
        return self._aisle_of_row[self.row_of_server(server_id)]

    def servers_in(self, scope_id: str) -> frozenset[str]:
        """Server ids transitively contained in an aisle or row (memoized)."""
        cached = self._scope_cache.get(scope_id)
        if cached is not None:
            return cached
        if scope_id in self._aisle_by_id:
            rows = self._aisle_by_id[scope_id].rows
        elif scope_id in self._row_by_id:
            rows = (scope_id,)
        else:
            raise TopologyError(f"unknown scope id {scope_id!r}")
        racks = {k for r in rows for k in self._row_by_id[r].racks}
        result = frozenset(s.id for s in self.servers if s.rack in racks)
        self._scope_cache[scope_id] = result
        return result

    @property
    def server_ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.servers)

    @property
    def server_count(self) -> int:
        return len(self.servers)

    def max_fan_cfm(self, server: Server) -> float:
        """Airflow drawn by a server with fans at 100% PWM."""
        return GPU_SPECS[server.gpu_type]["cfm_per_pwm"] * 100.0

    def total_tdp_w(self) -> float:
        return sum(s.tdp_w for s in self.servers)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "datacenter": self.datacenter,
            "delta_t_cooling": self.delta_t_cooling,
            "redundancy": {
                "ahus_per_aisle": self.redundancy.ahus_per_aisle,
                "ups_count": self.redundancy.ups_count,
                "ups_model": self.redundancy.ups_model,
            },
            "aisles": [
                {"id": a.id, "rows": list(a.rows),
                 "prov_ahu_cfm": a.prov_ahu_cfm, "ahu_units": a.ahu_units}
                for a in self.aisles
            ],
            "rows": [
                {"id": r.id, "racks": list(r.racks), "prov_power_w": r.prov_power_w}
                for r in self.rows
            ],
            "servers": [
                {"id": s.id, "rack": s.rack, "slot": s.slot,
                 "gpu_type": s.gpu_type, "gpu_count": s.gpu_count,
                 "idle_power_w": s.idle_power_w, "tdp_w": s.tdp_w}
                for s in self.servers
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def build_topology(spec: dict) -> Topology:
    """Build and validate a Topology from its structured (JSON) description.

    Raises TopologyError for dangling references, non-positive limits, or
    aisles without exactly two rows.
    """
    delta = float(spec.get("delta_t_cooling", 10.0))
    if delta <= 0:
        raise TopologyError("delta_t_cooling must be > 0")
    red_spec = spec.get("redundancy", {})
    redundancy = Redundancy(
        ahus_per_aisle=int(red_spec.get("ahus_per_aisle", 3)),
        ups_count=int(red_spec.get("ups_count", 4)),
        ups_model=str(red_spec.get("ups_model", "4N/3")),
    )

    rows = tuple(
        Row(id=r["id"], racks=tuple(r["racks"]), prov_power_w=float(r["prov_power_w"]))
        for r in spec["rows"]
    )
    aisles = tuple(
        Aisle(id=a["id"], rows=tuple(a["rows"]),
              prov_ahu_cfm=float(a["prov_ahu_cfm"]),
              ahu_units=int(a.get("ahu_units", redundancy.ahus_per_aisle)))
        for a in spec["aisles"]
    )
    servers = tuple(
        Server(id=s["id"], rack=s["rack"], slot=int(s["slot"]),
               gpu_type=s["gpu_type"],
               idle_power_w=float(s["idle_power_w"]), tdp_w=float(s["tdp_w"]),
               gpu_count=int(s.get("gpu_count", GPUS_PER_SERVER)))
        for s in spec["servers"]
    )

    row_ids = [r.id for r in rows]
    aisle_ids = [a.id for a in aisles]
    server_ids = [s.id for s in servers]
    for name, ids in (("row", row_ids), ("aisle", aisle_ids), ("server", server_ids)):
        if len(ids) != len(set(ids)):
            raise TopologyError(f"duplicate {name} ids")

    row_set = set(row_ids)
    seen_rows: set[str] = set()
    for a in aisles:
        if len(a.rows) != 2:
            raise TopologyError(f"aisle {a.id!r} must have exactly two rows")
        if a.prov_ahu_cfm <= 0:
            raise TopologyError(f"aisle {a.id!r}: ProvAHU must be > 0")
        if a.ahu_units < 2:
            raise TopologyError(f"aisle {a.id!r}: need >= 2 AHU units")
        for r in a.rows:
            if r not in row_set:
                raise TopologyError(f"dangling reference: row {r!r} in aisle {a.id!r}")
            if r in seen_rows:
                raise TopologyError(f"row {r!r} belongs to more than one aisle")
            seen_rows.add(r)
    if seen_rows != row_set:
        orphans = sorted(row_set - seen_rows)
        raise TopologyError(f"rows not in any aisle: {orphans}")

    rack_to_row: dict[str, str] = {}
    for r in rows:
        if r.prov_power_w <= 0:
            raise TopologyError(f"row {r.id!r}: ProvPower must be > 0")
        for k in r.racks:
            if k in rack_to_row:
                raise TopologyError(f"rack {k!r} belongs to more than one row")
            rack_to_row[k] = r.id

    for s in servers:
        if s.rack not in rack_to_row:
            raise TopologyError(f"dangling reference: rack {s.rack!r} for server {s.id!r}")
        if s.gpu_type not in GPU_SPECS:
            raise TopologyError(f"server {s.id!r}: unknown GPU type {s.gpu_type!r}")
        if s.gpu_count != GPUS_PER_SERVER:
            raise TopologyError(f"server {s.id!r}: gpu count must be {GPUS_PER_SERVER}")
        if not (0 < s.idle_power_w < s.tdp_w):
            raise TopologyError(f"server {s.id!r}: need 0 < idle power < TDP")

    return Topology(datacenter=spec.get("datacenter", "dc0"), delta_t_cooling=delta,
                    redundancy=redundancy, aisles=aisles, rows=rows, servers=servers)


def load_topology(path: str | Path) -> Topology:
    return build_topology(json.loads(Path(path).read_text()))


def grid_topology(n_aisles: int = 4, racks_per_row: int = 10,
                  servers_per_rack: int = 4, gpu_type: str = "A100",
                  oversubscription: float = 0.0,
                  delta_t_cooling: float = 10.0,
                  datacenter: str = "dc0") -> Topology:
    """Regular layout generator. Provisioned limits cover all servers at full
    load divided by (1 + oversubscription), so 0.0 means no oversubscription.
    """
    gs = GPU_SPECS[gpu_type]
    servers_per_row = racks_per_row * servers_per_rack
    prov_power = servers_per_row * gs["tdp_w"] / (1.0 + oversubscription)
    prov_ahu = 2 * servers_per_row * gs["cfm_per_pwm"] * 100.0 / (1.0 + oversubscription)

    aisles, rows, servers = [], [], []
    sid = 0
    for ai in range(n_aisles):
        row_pair = []
        for ri in range(2):
            row_id = f"R{2 * ai + ri}"
            racks = []
            for ki in range(racks_per_row):
                rack_id = f"{row_id}K{ki}"
                racks.append(rack_id)
                for slot in range(servers_per_rack):
                    servers.append({
                        "id": f"S{sid:04d}", "rack": rack_id, "slot": slot,
                        "gpu_type": gpu_type,
                        "idle_power_w": gs["idle_w"], "tdp_w": gs["tdp_w"],
                    })
                    sid += 1
            rows.append({"id": row_id, "racks": racks, "prov_power_w": prov_power})
            row_pair.append(row_id)
        aisles.append({"id": f"A{ai}", "rows": row_pair,
                       "prov_ahu_cfm": prov_ahu, "ahu_units": 3})
    return build_topology({
        "datacenter": datacenter, "delta_t_cooling": delta_t_cooling,
        "aisles": aisles, "rows": rows, "servers": servers,
    })
