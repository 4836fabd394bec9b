"""Driving traces and the LLM instance configuration profile table.

Everything stochastic here is a pure function of (params, seed): VM
arrivals and lifetimes, per-VM diurnal IaaS load series, per-endpoint
request streams, and the outside temperature series. The ConfigProfile
table enumerates the five configuration knobs (GPU frequency, tensor
parallelism, batch size, model size, quantization) with synthetic but
directionally faithful temperature/power/goodput/quality numbers; a
checked-in copy ships as package data and measured tables can be
substituted via ``load_profiles``.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .power import default_power_curve

TICK_SECONDS = 60
TICKS_PER_HOUR = 3600 // TICK_SECONDS
TICKS_PER_DAY = 24 * TICKS_PER_HOUR
TICKS_PER_WEEK = 7 * TICKS_PER_DAY

#: Reference operating point at which profile temperatures are quoted.
REF_INLET_C = 25.0
REF_GPU_OFFSET_C = 8.0      # idle offset of a warm reference server
REF_GPU_GAIN_C = 44.0       # full-load heating of its hottest GPU
REF_PER_GPU_TDP_W = 400.0


class WorkloadError(ValueError):
    """Raised for infeasible generator parameters or malformed inputs."""


def _fold_seed(seed: int, *parts) -> np.random.Generator:
    """Deterministic per-entity RNG: fold string/int parts into the seed."""
    folded = [int(seed) & 0xFFFFFFFF]
    for p in parts:
        if isinstance(p, str):
            folded.append(zlib.crc32(p.encode()))
        else:
            folded.append(int(p) & 0xFFFFFFFF)
    return np.random.default_rng(folded)


# ---------------------------------------------------------------------------
# VM records and arrivals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VmRecord:
    vm_id: str
    kind: str                      # "iaas" | "saas"
    arrival_tick: int
    lifetime_ticks: int
    customer_id: str | None = None   # IaaS only
    endpoint_id: str | None = None   # SaaS only
    full_server: bool = True

    def __post_init__(self):
        if self.lifetime_ticks <= 0:
            raise WorkloadError(f"vm {self.vm_id!r}: lifetime must be > 0")
        if self.kind == "iaas":
            if self.customer_id is None or self.endpoint_id is not None:
                raise WorkloadError(f"vm {self.vm_id!r}: IaaS needs a customer id only")
        elif self.kind == "saas":
            if self.endpoint_id is None or self.customer_id is not None:
                raise WorkloadError(f"vm {self.vm_id!r}: SaaS needs an endpoint id only")
        else:
            raise WorkloadError(f"vm {self.vm_id!r}: unknown kind {self.kind!r}")

    @property
    def scope_id(self) -> str:
        """History scope for load prediction: customer or endpoint."""
        return self.customer_id if self.kind == "iaas" else self.endpoint_id


@dataclass(frozen=True)
class ArrivalParams:
    n_vms: int
    n_servers: int
    iaas_fraction: float = 0.5
    n_customers: int = 12
    n_endpoints: int = 10
    arrival_window_ticks: int = TICKS_PER_WEEK
    initial_fraction: float = 0.85      # VMs already running at tick 0
    long_lived_fraction: float = 0.70
    long_lifetime_ticks: tuple[int, int] = (2 * TICKS_PER_WEEK, 8 * TICKS_PER_WEEK)
    short_lifetime_ticks: tuple[int, int] = (2 * TICKS_PER_HOUR, TICKS_PER_WEEK)


def generate_vm_arrivals(params: ArrivalParams, seed: int) -> list[VmRecord]:
    """Deterministic synthetic VM arrival trace.

    With default lifetime parameters at least 60% of VMs outlive two weeks.
    SaaS VMs are assigned to endpoints in contiguous blocks of near-equal
    size, mimicking fleet deployments.
    """
    if params.n_vms <= 0:
        raise WorkloadError("n_vms must be > 0")
    rng = _fold_seed(seed, "vm-arrivals")
    n_iaas = int(round(params.n_vms * params.iaas_fraction))

    # Interleave kinds deterministically so prefixes stay near the target mix.
    kinds = []
    due = 0.0
    iaas_left, saas_left = n_iaas, params.n_vms - n_iaas
    for _ in range(params.n_vms):
        due += params.iaas_fraction
        if saas_left == 0 or (due >= 1.0 and iaas_left > 0):
            kinds.append("iaas")
            iaas_left -= 1
            due -= 1.0
        else:
            kinds.append("saas")
            saas_left -= 1

    records = []
    n_saas = params.n_vms - n_iaas
    saas_i = 0
    for i, kind in enumerate(kinds):
        # Initial membership is an independent draw per VM so every
        # customer and endpoint is represented from tick 0.
        if rng.random() < params.initial_fraction:
            arrival = 0
        else:
            arrival = int(rng.integers(1, max(params.arrival_window_ticks, 2)))
        if rng.random() < params.long_lived_fraction:
            lifetime = int(rng.integers(*params.long_lifetime_ticks))
        else:
            lifetime = int(rng.integers(*params.short_lifetime_ticks))
        if kind == "iaas":
            rec = VmRecord(vm_id=f"vm{i:04d}", kind="iaas",
                           arrival_tick=arrival, lifetime_ticks=lifetime,
                           customer_id=f"cust{int(rng.integers(params.n_customers)):03d}")
        else:
            # Striped assignment: consecutive SaaS VMs go to different
            # endpoints, so every endpoint's fleet spans the datacenter
            # instead of clustering in adjacent racks.
            ep = saas_i % params.n_endpoints
            rec = VmRecord(vm_id=f"vm{i:04d}", kind="saas",
                           arrival_tick=arrival, lifetime_ticks=lifetime,
                           endpoint_id=f"ep{ep:02d}")
            saas_i += 1
        records.append(rec)
    initial = sum(1 for r in records if r.arrival_tick == 0)
    if initial > params.n_servers:
        raise WorkloadError(
            f"infeasible: {initial} initial VMs exceed {params.n_servers} servers")
    records.sort(key=lambda r: (r.arrival_tick, r.vm_id))
    return records


# ---------------------------------------------------------------------------
# IaaS load traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiurnalParams:
    base: tuple[float, float] = (0.52, 0.60)
    amplitude: tuple[float, float] = (0.34, 0.42)
    peak_hour: float = 14.0
    peak_jitter_h: float = 1.0
    noise_sigma: float = 0.03


def generate_iaas_power_trace(vm: VmRecord, seed: int,
                              params: DiurnalParams | None = None,
                              noise_sigma: float | None = None) -> np.ndarray:
    """Per-tick GPU load fractions for one IaaS VM over its lifetime.

    Diurnal cosine peaking in the early afternoon; the shape parameters are
    drawn per customer so same-customer VMs are mutually predictive, which
    is what template-based load estimation relies on.
    """
    if vm.kind != "iaas":
        raise WorkloadError(f"vm {vm.vm_id!r} is not IaaS")
    p = params or DiurnalParams()
    sigma = p.noise_sigma if noise_sigma is None else noise_sigma
    crng = _fold_seed(seed, "iaas-shape", vm.customer_id)
    base = crng.uniform(*p.base)
    amp = crng.uniform(*p.amplitude)
    peak = p.peak_hour + crng.uniform(-p.peak_jitter_h, p.peak_jitter_h)

    rng = _fold_seed(seed, "iaas-noise", vm.vm_id)
    ticks = np.arange(vm.arrival_tick, vm.arrival_tick + vm.lifetime_ticks)
    hour = (ticks % TICKS_PER_DAY) / TICKS_PER_HOUR
    load = base + amp * np.cos(2.0 * np.pi * (hour - peak) / 24.0)
    if sigma > 0:
        load = load + rng.normal(0.0, sigma, len(ticks))
    return np.clip(load, 0.0, 1.0)


# ---------------------------------------------------------------------------
# SaaS endpoints and request streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EndpointSpec:
    endpoint_id: str
    vm_count: int
    rate_tps: tuple[float, ...]        # tokens/s per tick
    prompt_fraction: float = 0.3
    quality_slo: float = 0.88
    customer_pool: int = 16

    def __post_init__(self):
        if self.vm_count < 1:
            raise WorkloadError(f"endpoint {self.endpoint_id!r}: vm_count must be >= 1")
        if any(r < 0 for r in self.rate_tps):
            raise WorkloadError(f"endpoint {self.endpoint_id!r}: rates must be >= 0")


@dataclass(frozen=True)
class RequestBatch:
    endpoint_id: str
    tick: int
    prompt_tokens: float
    decode_tokens: float
    affinity_key: str

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.decode_tokens < 0:
            raise WorkloadError("token demand must be >= 0")

    @property
    def tokens(self) -> float:
        return self.prompt_tokens + self.decode_tokens


def diurnal_rate_series(duration_ticks: int, peak_tps: float, seed: int,
                        endpoint_id: str, trough_fraction: float = 0.35,
                        peak_hour: float = 14.0,
                        noise_sigma: float = 0.04) -> np.ndarray:
    """Diurnal tokens/s series in [trough, peak] with lognormal noise."""
    rng = _fold_seed(seed, "rate", endpoint_id)
    ticks = np.arange(duration_ticks)
    hour = (ticks % TICKS_PER_DAY) / TICKS_PER_HOUR
    mid = 0.5 * (1.0 + trough_fraction)
    amp = 0.5 * (1.0 - trough_fraction)
    shape = mid + amp * np.cos(2.0 * np.pi * (hour - peak_hour) / 24.0)
    noise = rng.lognormal(mean=0.0, sigma=noise_sigma, size=duration_ticks)
    return np.maximum(peak_tps * shape * noise, 0.0)


def generate_request_trace(endpoint: EndpointSpec, seed: int,
                           batches_per_tick: int = 4) -> list[RequestBatch]:
    """Deterministic request batches for one endpoint.

    Each tick's token demand (rate x tick length) is split across a fixed
    number of batches whose affinity keys are reused from a bounded
    per-endpoint customer pool.
    """
    rng = _fold_seed(seed, "requests", endpoint.endpoint_id)
    batches: list[RequestBatch] = []
    for tick, rate in enumerate(endpoint.rate_tps):
        tokens = rate * TICK_SECONDS
        if tokens <= 0.0:
            continue
        split = rng.dirichlet(np.ones(batches_per_tick)) * tokens
        keys = rng.integers(0, endpoint.customer_pool, batches_per_tick)
        for j in range(batches_per_tick):
            if split[j] <= 0.0:
                continue
            batches.append(RequestBatch(
                endpoint_id=endpoint.endpoint_id, tick=tick,
                prompt_tokens=split[j] * endpoint.prompt_fraction,
                decode_tokens=split[j] * (1.0 - endpoint.prompt_fraction),
                affinity_key=f"{endpoint.endpoint_id}-c{keys[j]:02d}"))
    return batches


# ---------------------------------------------------------------------------
# Outside temperature
# ---------------------------------------------------------------------------

def generate_outside_temp(duration_ticks: int, seed: int, mean_c: float = 23.0,
                          daily_amplitude_c: float = 6.0,
                          day_drift_c: float = 1.0,
                          peak_hour: float = 15.0) -> np.ndarray:
    """Per-tick outside temperature: daily sinusoid plus day-to-day drift."""
    rng = _fold_seed(seed, "outside-temp")
    n_days = duration_ticks // TICKS_PER_DAY + 2
    drift = rng.uniform(-day_drift_c, day_drift_c, n_days)
    ticks = np.arange(duration_ticks)
    hour = (ticks % TICKS_PER_DAY) / TICKS_PER_HOUR
    day = ticks // TICKS_PER_DAY
    return (mean_c + drift[day]
            + daily_amplitude_c * np.cos(2.0 * np.pi * (hour - peak_hour) / 24.0))


# ---------------------------------------------------------------------------
# Configuration profiles
# ---------------------------------------------------------------------------

FREQ_TIERS_GHZ = (1.0, 1.5, 2.0)
TP_DEGREES = (2, 4, 8)
BATCH_SIZES = (1, 16, 64)
MODEL_SIZES = ("7B", "13B", "70B")
QUANTIZATIONS = ("FP16", "FP8")

_QUALITY = {("70B", "FP16"): 1.00, ("70B", "FP8"): 0.90,
            ("13B", "FP16"): 0.80, ("13B", "FP8"): 0.72,
            ("7B", "FP16"): 0.65, ("7B", "FP8"): 0.60}
_GOODPUT_MODEL = {"70B": 1.0, "13B": 2.2, "7B": 3.6}
_GOODPUT_BATCH = {1: 0.30, 16: 0.85, 64: 1.0}
_GOODPUT_TP = {2: 0.45, 4: 0.75, 8: 1.0}
_INTENSITY_MODEL = {"70B": 1.0, "13B": 0.62, "7B": 0.45}
_INTENSITY_BATCH = {1: 0.55, 16: 0.85, 64: 1.0}
_BASE_GOODPUT_TPS = 1000.0
_BASE_INTENSITY = 0.68
# Power scales superlinearly with frequency while goodput scales
# sublinearly, so lower tiers are more efficient per token.
_FREQ_POWER_EXP = 1.15
_FREQ_GOODPUT_EXP = 0.7


@dataclass(frozen=True)
class ConfigProfile:
    """One point in the five-knob configuration space.

    ``gpu_intensity`` is the load fraction on each of the ``tp`` active GPUs
    at full utilization; ``mean_load`` spreads that over all 8 GPUs and is
    what the power/airflow models consume.
    """

    profile_id: str
    freq_ghz: float
    tp: int
    batch: int
    model: str
    quant: str
    gpu_intensity: float
    max_gpu_temp_c: float          # hottest GPU at the reference inlet
    server_watts: float
    per_gpu_watts: float
    goodput_tps: float
    quality: float
    reload_cost_ticks: int

    @property
    def mean_load(self) -> float:
        return self.gpu_intensity * self.tp / 8.0

    def needs_reload_from(self, other: "ConfigProfile") -> bool:
        """Model reload required iff TP, model size, or quantization change."""
        return (self.tp, self.model, self.quant) != (other.tp, other.model, other.quant)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "profile_id", "freq_ghz", "tp", "batch", "model", "quant",
            "gpu_intensity", "max_gpu_temp_c", "server_watts", "per_gpu_watts",
            "goodput_tps", "quality", "reload_cost_ticks")}


def _make_profile(freq: float, tp: int, batch: int, model: str, quant: str,
                  ref_curve) -> ConfigProfile:
    intensity = (_BASE_INTENSITY * _INTENSITY_MODEL[model]
                 * _INTENSITY_BATCH[batch]
                 * (0.8 if quant == "FP8" else 1.0)
                 * (freq / 2.0) ** _FREQ_POWER_EXP
                 * math.sqrt(8.0 / tp))
    intensity = min(intensity, 1.0)
    goodput = (_BASE_GOODPUT_TPS * _GOODPUT_MODEL[model]
               * _GOODPUT_BATCH[batch] * _GOODPUT_TP[tp]
               * (1.25 if quant == "FP8" else 1.0)
               * (freq / 2.0) ** _FREQ_GOODPUT_EXP)
    mean_load = intensity * tp / 8.0
    return ConfigProfile(
        profile_id=f"{model}-{quant}-tp{tp}-b{batch}-f{freq:.1f}",
        freq_ghz=freq, tp=tp, batch=batch, model=model, quant=quant,
        gpu_intensity=round(intensity, 6),
        max_gpu_temp_c=round(REF_INLET_C + REF_GPU_OFFSET_C
                             + REF_GPU_GAIN_C * intensity, 3),
        server_watts=round(ref_curve.watts(mean_load), 3),
        per_gpu_watts=round(REF_PER_GPU_TDP_W * intensity, 3),
        goodput_tps=round(goodput, 3),
        quality=_QUALITY[(model, quant)],
        reload_cost_ticks=1,
    )


def build_default_profiles() -> list[ConfigProfile]:
    """Full knob cross product with synthetic, direction-faithful metrics."""
    ref_curve = default_power_curve(1500.0, 6500.0)
    table = []
    for model in MODEL_SIZES:
        for quant in QUANTIZATIONS:
            for tp in TP_DEGREES:
                for batch in BATCH_SIZES:
                    for freq in FREQ_TIERS_GHZ:
                        table.append(_make_profile(freq, tp, batch, model,
                                                   quant, ref_curve))
    return table


def nominal_profile(table: list[ConfigProfile]) -> ConfigProfile:
    """Highest-goodput full-quality profile; the no-pressure default."""
    full = [p for p in table if p.quality >= 1.0]
    return max(full, key=lambda p: (p.goodput_tps, -p.server_watts, p.profile_id))


def save_profiles(table: list[ConfigProfile], path: str | Path) -> None:
    doc = {
        "version": 1,
        "knobs": {"freq_ghz": list(FREQ_TIERS_GHZ), "tp": list(TP_DEGREES),
                  "batch": list(BATCH_SIZES), "model": list(MODEL_SIZES),
                  "quant": list(QUANTIZATIONS)},
        "profiles": [p.to_dict() for p in table],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_profiles(path: str | Path) -> list[ConfigProfile]:
    """Load and validate a profile table file.

    The header declares the knob values; the table must cover all their
    combinations exactly once.
    """
    doc = json.loads(Path(path).read_text())
    try:
        knobs = doc["knobs"]
        rows = doc["profiles"]
    except (KeyError, TypeError) as exc:
        raise WorkloadError(f"malformed profile file: {exc}") from None
    if not rows:
        raise WorkloadError("profile table is empty")
    table = [ConfigProfile(**row) for row in rows]
    seen = set()
    for p in table:
        key = (p.freq_ghz, p.tp, p.batch, p.model, p.quant)
        if key in seen:
            raise WorkloadError(f"duplicate knob combination {key}")
        seen.add(key)
    expected = {(f, t, b, m, q)
                for f in knobs["freq_ghz"] for t in knobs["tp"]
                for b in knobs["batch"] for m in knobs["model"]
                for q in knobs["quant"]}
    missing = expected - seen
    if missing:
        raise WorkloadError(f"profile table missing {len(missing)} declared "
                            f"knob combinations, e.g. {sorted(missing)[0]}")
    return table


def load_default_profiles() -> list[ConfigProfile]:
    with resources.as_file(resources.files("tapas_sim.data") / "profiles.json") as p:
        return load_profiles(p)


def pareto_frontier(table: list[ConfigProfile],
                    model_size: str | None = None) -> list[ConfigProfile]:
    """Profiles not dominated in (temperature, power, -goodput).

    A profile is dominated if another (of the same model size, when given)
    is no worse on all three axes and strictly better on at least one.
    """
    pool = [p for p in table if model_size is None or p.model == model_size]
    out = []
    for p in pool:
        dominated = False
        for q in pool:
            if q is p:
                continue
            no_worse = (q.max_gpu_temp_c <= p.max_gpu_temp_c
                        and q.server_watts <= p.server_watts
                        and q.goodput_tps >= p.goodput_tps)
            better = (q.max_gpu_temp_c < p.max_gpu_temp_c
                      or q.server_watts < p.server_watts
                      or q.goodput_tps > p.goodput_tps)
            if no_worse and better:
                dominated = True
                break
        if not dominated:
            out.append(p)
    return out
