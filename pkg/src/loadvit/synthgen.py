"""Seeded synthetic households with sub-metered HVAC, EV and PV.

Every household draws its parameters and noise from a generator seeded by
(master seed, household id), so the output does not depend on generation
order. Net load is always base + hvac + ev - pv.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .codec import (
    DatasetManifest,
    LoadProfileRecord,
    compute_bounds,
    write_records_csv,
)
from .errors import ContractError

GENERATOR_VERSION = "1"
DEFAULT_START = datetime(2023, 1, 1, tzinfo=timezone.utc)
HOURS = np.arange(24)


def derive_seed(master: int, name: str) -> int:
    """Child seed for a named component; stable across runs and platforms."""
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class WeatherModel:
    annual_mean: float = 20.5
    seasonal_amplitude: float = 9.0
    diurnal_amplitude: float = 5.5
    temperature_noise: float = 1.5
    peak_irradiance: float = 1000.0
    solar_noon: float = 13.0
    mean_daylight: float = 12.0
    daylight_swing: float = 1.8
    cloud_mean: float = 0.25
    cloud_persistence: float = 0.6


@dataclass(frozen=True)
class HouseholdSpec:
    base_night: float = 0.5
    morning_peak: float = 1.0
    evening_peak: float = 1.8
    hvac_setpoint: float = 22.0
    hvac_gain: float = 0.4
    hvac_cap: float = 5.0
    hvac_deadband: float = 1.0
    pv_capacity: float = 0.0
    ev_power: float = 0.0
    ev_session_probability: float = 0.5
    ev_session_hours: int = 3
    ev_start_hour: int = 19
    ev_start_jitter: float = 0.3
    noise_scale: float = 0.1

    def __post_init__(self):
        for name in ("hvac_gain", "hvac_cap", "pv_capacity", "ev_power", "noise_scale"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")
        if not 0.0 <= self.ev_session_probability <= 1.0:
            raise ContractError("ev_session_probability must be in [0, 1]")
        if not 17 <= self.ev_start_hour <= 22:
            raise ContractError("ev_start_hour must be an evening hour in [17, 22]")

    @property
    def has_pv(self) -> bool:
        return self.pv_capacity > 0

    @property
    def has_ev(self) -> bool:
        return self.ev_power > 0


def gen_weather(
    days: int,
    model: WeatherModel = WeatherModel(),
    seed: int = 0,
    start_doy: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Hourly temperature (degC) and global horizontal irradiance (W/m2)."""
    if days < 1:
        raise ContractError(f"days must be >= 1, got {days}")
    rng = np.random.default_rng(seed)
    doy = (start_doy + np.arange(days)) % 365
    # coldest mid-January, warmest mid-July
    seasonal = model.annual_mean - model.seasonal_amplitude * np.cos(2 * np.pi * (doy - 15) / 365)
    diurnal = model.diurnal_amplitude * np.cos(2 * np.pi * (HOURS - 15) / 24)
    temp = seasonal[:, None] + diurnal[None, :]
    if model.temperature_noise > 0:
        # AR(1) weather anomaly, hourly
        eps = rng.normal(0.0, model.temperature_noise * math.sqrt(1 - 0.95**2), size=days * 24)
        anomaly = np.empty_like(eps)
        acc = rng.normal(0.0, model.temperature_noise)
        for i, e in enumerate(eps):
            acc = 0.95 * acc + e
            anomaly[i] = acc
        temp = temp + anomaly.reshape(days, 24)
    temp = np.clip(temp, -30.0, 50.0)

    daylen = model.mean_daylight + model.daylight_swing * np.sin(2 * np.pi * (doy - 80) / 365)
    sunrise = model.solar_noon - daylen / 2
    phase = (HOURS[None, :] + 0.5 - sunrise[:, None]) / daylen[:, None]
    clear = np.where((phase > 0) & (phase < 1), np.sin(np.pi * np.clip(phase, 0, 1)), 0.0)
    clear *= model.peak_irradiance * (0.85 + 0.15 * np.sin(2 * np.pi * (doy - 80) / 365))[:, None]
    # daily cloudiness as a persistent two-state chain with random depth
    # stationary cloudy fraction equals cloud_mean
    stay = model.cloud_persistence
    onset = min(1.0, model.cloud_mean * (1 - stay) / max(1 - model.cloud_mean, 1e-9))
    cloudy = np.empty(days, dtype=bool)
    state = rng.random() < model.cloud_mean
    for d in range(days):
        state = rng.random() < (stay if state else onset)
        cloudy[d] = state
    depth = np.where(cloudy, rng.uniform(0.3, 0.8, size=days), rng.uniform(0.0, 0.1, size=days))
    flicker = 1.0 - np.clip(rng.normal(0.0, 0.02, size=(days, 24)), 0.0, 0.5)
    irr = clear * (1.0 - depth)[:, None] * flicker
    irr = np.where(clear > 0, np.maximum(irr, 0.0), 0.0)
    return temp.reshape(-1), irr.reshape(-1)


def _base_shape(spec: HouseholdSpec) -> np.ndarray:
    morning = spec.morning_peak * np.exp(-0.5 * ((HOURS - 7.5) / 1.3) ** 2)
    evening = spec.evening_peak * np.exp(-0.5 * ((HOURS - 19.5) / 2.0) ** 2)
    return spec.base_night + morning + evening


def gen_household(
    spec: HouseholdSpec,
    temperature: np.ndarray,
    irradiance: np.ndarray,
    seed: int,
    household_id: str = "h000",
    start_time: datetime = DEFAULT_START,
    peak_irradiance: float = 1000.0,
) -> LoadProfileRecord:
    if len(temperature) != len(irradiance) or len(temperature) % 24:
        raise ContractError("weather series must share a whole-day length")
    rng = np.random.default_rng(seed)
    n = len(temperature)
    days = n // 24
    noise = spec.noise_scale

    day_scale = rng.lognormal(0.0, 0.5 * noise, size=days) if noise > 0 else np.ones(days)
    base = (day_scale[:, None] * _base_shape(spec)[None, :]).reshape(-1)
    if noise > 0:
        base = base * rng.lognormal(0.0, noise, size=n)

    drive = np.maximum(0.0, np.abs(temperature - spec.hvac_setpoint) - spec.hvac_deadband)
    hvac = np.minimum(spec.hvac_cap, spec.hvac_gain * drive)
    if noise > 0:
        hvac = hvac + rng.normal(0.0, 0.5 * noise, size=n) * (hvac > 0)
    hvac = np.maximum(hvac, 0.0)

    pv = spec.pv_capacity * irradiance / peak_irradiance
    if noise > 0 and spec.pv_capacity > 0:
        pv = pv * (1.0 + rng.normal(0.0, 0.2 * noise, size=n))
    pv = np.maximum(pv, 0.0)

    ev = np.zeros(n)
    if spec.ev_power > 0:
        for d in range(days):
            if rng.random() < spec.ev_session_probability:
                hour = spec.ev_start_hour
                if rng.random() < spec.ev_start_jitter:
                    hour = min(22, max(17, hour + int(rng.choice((-1, 1)))))
                start = d * 24 + hour
                ev[start:start + spec.ev_session_hours] = spec.ev_power

    net = base + hvac + ev - pv
    return LoadProfileRecord(
        household_id=household_id,
        start_time=start_time,
        net_load=net,
        temperature=np.asarray(temperature, dtype=np.float64).copy(),
        irradiance=np.asarray(irradiance, dtype=np.float64).copy(),
        hvac=hvac,
        ev=ev,
        pv=pv,
        has_pv=spec.has_pv,
        has_ev=spec.has_ev,
        base=base,
    )


def random_spec(rng: np.random.Generator, with_pv: bool, with_ev: bool) -> HouseholdSpec:
    return HouseholdSpec(
        base_night=rng.uniform(0.3, 0.9),
        morning_peak=rng.uniform(0.4, 1.6),
        evening_peak=rng.uniform(0.8, 2.8),
        hvac_setpoint=rng.uniform(20.0, 24.0),
        hvac_gain=rng.uniform(0.25, 0.6),
        hvac_cap=rng.uniform(2.0, 4.5),
        pv_capacity=rng.uniform(4.0, 9.0) if with_pv else 0.0,
        ev_power=rng.uniform(6.0, 7.2) if with_ev else 0.0,
        ev_session_probability=rng.uniform(0.5, 0.9),
        ev_session_hours=int(rng.integers(2, 5)),
        ev_start_hour=int(rng.integers(17, 23)),
        ev_start_jitter=rng.uniform(0.1, 0.4),
        noise_scale=rng.uniform(0.03, 0.1),
    )


def _forced_subset(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"fractions must be in [0, 1], got {fraction}")
    k = int(math.floor(fraction * n + 0.5))
    flags = np.zeros(n, dtype=bool)
    flags[rng.permutation(n)[:k]] = True
    return flags


def household_ids(n: int) -> list[str]:
    width = max(3, len(str(n - 1)))
    return [f"h{i:0{width}d}" for i in range(n)]


@dataclass
class SyntheticDataset:
    records: list[LoadProfileRecord]
    manifest: DatasetManifest

    def split(self, part: str) -> list[LoadProfileRecord]:
        keep = set(self.manifest.train_households if part == "train" else self.manifest.test_households)
        return [r for r in self.records if r.household_id in keep]


def generate(
    num_households: int,
    days: int,
    pv_fraction: float = 0.5,
    ev_fraction: float = 0.5,
    seed: int = 0,
    train_fraction: float = 2 / 3,
    weather: WeatherModel = WeatherModel(),
    shared_weather: bool = True,
) -> SyntheticDataset:
    """Build records plus a manifest in memory (see ``gen_dataset`` for files).

    Bounds are computed over the training households only.
    """
    if num_households < 1:
        raise ContractError("need at least one household")
    mix_rng = np.random.default_rng(derive_seed(seed, "mix"))
    has_pv = _forced_subset(num_households, pv_fraction, mix_rng)
    has_ev = _forced_subset(num_households, ev_fraction, mix_rng)
    ids = household_ids(num_households)
    split_rng = np.random.default_rng(derive_seed(seed, "split"))
    order = split_rng.permutation(num_households)
    n_train = int(round(train_fraction * num_households))
    if num_households > 1:
        n_train = min(max(n_train, 1), num_households - 1)
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])

    if shared_weather:
        temp, irr = gen_weather(days, weather, derive_seed(seed, "weather"))
    records = []
    for k, hid in enumerate(ids):
        hseed = derive_seed(seed, hid)
        spec = random_spec(np.random.default_rng(hseed), bool(has_pv[k]), bool(has_ev[k]))
        if not shared_weather:
            temp, irr = gen_weather(days, weather, derive_seed(hseed, "weather"))
        records.append(
            gen_household(spec, temp, irr, derive_seed(hseed, "load"), hid,
                          peak_irradiance=weather.peak_irradiance)
        )
    train_set = set(train)
    bounds = compute_bounds([r for r in records if r.household_id in train_set])
    manifest = DatasetManifest(
        bounds,
        train,
        test,
        extra={
            "generator.version": GENERATOR_VERSION,
            "generator.seed": str(seed),
            "generator.households": str(num_households),
            "generator.days": str(days),
            "generator.pv_fraction": repr(float(pv_fraction)),
            "generator.ev_fraction": repr(float(ev_fraction)),
        },
    )
    return SyntheticDataset(records, manifest)


def gen_dataset(
    out_dir: Path,
    num_households: int,
    days: int,
    pv_fraction: float = 0.5,
    ev_fraction: float = 0.5,
    seed: int = 0,
) -> SyntheticDataset:
    """Write ``data.csv`` and ``manifest.txt`` into ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc.strerror}") from exc
    ds = generate(num_households, days, pv_fraction, ev_fraction, seed)
    write_records_csv(ds.records, out_dir / "data.csv")
    ds.manifest.write(out_dir / "manifest.txt")
    return ds


def augment(
    record: LoadProfileRecord,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.9, 1.1),
    noise_fraction: float = 0.02,
    max_shift_days: int = 3,
) -> LoadProfileRecord:
    """Jitter a record while keeping labels and the net-load accounting.

    Load components share one scale factor; noise on the load channel goes
    into the base component. Irradiance stays zero at night.
    """
    lo, hi = scale_range
    s_load, s_temp, s_irr = rng.uniform(lo, hi, size=3)
    shift = int(rng.integers(-max_shift_days, max_shift_days + 1)) * 24 if max_shift_days else 0
    n = len(record.net_load)
    base = record.base if record.base is not None else record.net_load - record.hvac - record.ev + record.pv

    def jitter(x, scale_factor):
        y = x * scale_factor
        if noise_fraction > 0:
            span = float(np.ptp(x)) if n else 0.0
            y = y + rng.normal(0.0, noise_fraction * span, size=n)
        return y

    base = jitter(base, s_load)
    hvac, ev, pv = record.hvac * s_load, record.ev * s_load, record.pv * s_load
    temp = jitter(record.temperature, s_temp)
    irr = jitter(record.irradiance, s_irr)
    irr = np.where(record.irradiance > 0, np.maximum(irr, 0.0), 0.0)
    pv = np.where(irr > 0, pv, 0.0)
    arrays = dict(base=base, hvac=hvac, ev=ev, pv=pv, temperature=temp, irradiance=irr)
    if shift:
        arrays = {k: np.roll(v, shift) for k, v in arrays.items()}
    arrays["net_load"] = arrays["base"] + arrays["hvac"] + arrays["ev"] - arrays["pv"]
    return LoadProfileRecord(
        household_id=record.household_id,
        start_time=record.start_time,
        has_pv=record.has_pv,
        has_ev=record.has_ev,
        **arrays,
    )
