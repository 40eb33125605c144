"""Hourly household records and their conversion to 3-channel load images.

Rows of an image are consecutive days and columns are hours of the day.
Channel order is net load, temperature, irradiance. Every channel is mapped
onto [0, 1] with a global (lower, upper) pair shared by the whole dataset.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BoundsError, ContractError, ValidationError, WindowError

CHANNELS = ("load", "temperature", "irradiance")
HOURS_PER_DAY = 24
CSV_HEADER = (
    "household_id",
    "timestamp",
    "net_kw",
    "temp_c",
    "ghi_wm2",
    "hvac_kw",
    "ev_kw",
    "pv_kw",
    "has_pv",
    "has_ev",
)


@dataclass
class LoadProfileRecord:
    household_id: str
    start_time: datetime
    net_load: np.ndarray
    temperature: np.ndarray
    irradiance: np.ndarray
    hvac: np.ndarray
    ev: np.ndarray
    pv: np.ndarray
    has_pv: bool
    has_ev: bool
    base: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.net_load)
        for name in ("temperature", "irradiance", "hvac", "ev", "pv"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"{self.household_id}: {name} length differs from net_load")
        if n % HOURS_PER_DAY:
            raise ValidationError(f"{self.household_id}: length {n} is not a whole number of days")
        if self.start_time.tzinfo is None:
            self.start_time = self.start_time.replace(tzinfo=timezone.utc)

    @property
    def days(self) -> int:
        return len(self.net_load) // HOURS_PER_DAY

    def channel(self, name: str) -> np.ndarray:
        return {"load": self.net_load, "temperature": self.temperature, "irradiance": self.irradiance}[name]


@dataclass(frozen=True)
class NormalizationBounds:
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]

    def __post_init__(self):
        for c, lo, hi in zip(CHANNELS, self.lower, self.upper):
            if not hi > lo:
                raise BoundsError(f"bounds for {c} must satisfy upper > lower, got ({lo}, {hi})")

    def pair(self, channel: int) -> tuple[float, float]:
        return self.lower[channel], self.upper[channel]

    def to_items(self) -> list[tuple[str, str]]:
        items = [("channels", ",".join(CHANNELS))]
        for c, lo, hi in zip(CHANNELS, self.lower, self.upper):
            items.append((f"bounds.{c}.lower", repr(float(lo))))
            items.append((f"bounds.{c}.upper", repr(float(hi))))
        return items

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "NormalizationBounds":
        order = items.get("channels", ",".join(CHANNELS)).split(",")
        if tuple(order) != CHANNELS:
            raise ValidationError(f"unsupported channel order {order}")
        try:
            lo = tuple(float(items[f"bounds.{c}.lower"]) for c in CHANNELS)
            hi = tuple(float(items[f"bounds.{c}.upper"]) for c in CHANNELS)
        except KeyError as exc:
            raise ValidationError(f"manifest missing {exc.args[0]}") from None
        return cls(lo, hi)


@dataclass
class LoadImage:
    pixels: np.ndarray  # (days, slots_per_day, 3)
    bounds: NormalizationBounds
    household_id: str = ""
    start_time: datetime | None = None
    day_offset: int = 0

    @property
    def days(self) -> int:
        return self.pixels.shape[0]

    @property
    def slots_per_day(self) -> int:
        return self.pixels.shape[1]


def compute_bounds(
    records: Sequence[LoadProfileRecord],
    overrides: dict[str, tuple[float, float]] | None = None,
) -> NormalizationBounds:
    """Per-channel min/max over all records.

    A channel whose min equals its max cannot be normalized; supply its bounds
    through ``overrides`` (channel name -> (lower, upper)) instead.
    """
    if not records:
        raise ContractError("compute_bounds: no records given")
    overrides = overrides or {}
    lo, hi = [], []
    for c in CHANNELS:
        if c in overrides:
            a, b = overrides[c]
        else:
            a = min(float(np.min(r.channel(c))) for r in records)
            b = max(float(np.max(r.channel(c))) for r in records)
            if not (np.isfinite(a) and np.isfinite(b)):
                raise ContractError(f"compute_bounds: non-finite values in channel {c}")
            if a == b:
                raise BoundsError(
                    f"channel {c} is constant ({a}); provide explicit bounds for it"
                )
        lo.append(float(a))
        hi.append(float(b))
    return NormalizationBounds(tuple(lo), tuple(hi))


def normalize(values: np.ndarray, lower: float, upper: float) -> tuple[np.ndarray, int]:
    """Affine map onto [0, 1]; returns the clamped array and how many values were clamped."""
    x = (np.asarray(values, dtype=np.float64) - lower) / (upper - lower)
    clamped = int(np.count_nonzero((x < 0.0) | (x > 1.0)))
    return np.clip(x, 0.0, 1.0), clamped


def denormalize(pixels: np.ndarray, lower: float, upper: float) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) * (upper - lower) + lower


def profile_to_image(
    record: LoadProfileRecord,
    bounds: NormalizationBounds,
    day_offset: int = 0,
    days: int = 24,
) -> tuple[LoadImage, int]:
    """Cut ``days`` full days starting at ``day_offset`` into a load image.

    Returns the image and the number of clamped values.
    """
    if day_offset < 0 or record.days < day_offset + days:
        raise WindowError(
            f"{record.household_id}: needs {day_offset + days} days, record has {record.days}"
        )
    sl = slice(day_offset * HOURS_PER_DAY, (day_offset + days) * HOURS_PER_DAY)
    pixels = np.empty((days, HOURS_PER_DAY, 3))
    clamped = 0
    for k, c in enumerate(CHANNELS):
        lo, hi = bounds.pair(k)
        vals, n = normalize(record.channel(c)[sl], lo, hi)
        pixels[:, :, k] = vals.reshape(days, HOURS_PER_DAY)
        clamped += n
    start = record.start_time + timedelta(days=day_offset)
    return LoadImage(pixels, bounds, record.household_id, start, day_offset), clamped


def image_to_profile(image: LoadImage, channel: int = 0) -> np.ndarray:
    """Hourly series in physical units for one channel of an image."""
    if not 0 <= channel < len(CHANNELS):
        raise ContractError(f"channel index {channel} out of range [0, {len(CHANNELS)})")
    lo, hi = image.bounds.pair(channel)
    return denormalize(image.pixels[:, :, channel].reshape(-1), lo, hi)


def window_starts(total_days: int, window_days: int, stride_days: int) -> list[int]:
    if stride_days < 1:
        raise ContractError(f"stride_days must be >= 1, got {stride_days}")
    if total_days < window_days:
        return []
    return list(range(0, total_days - window_days + 1, stride_days))


def window_dataset(
    records: Iterable[LoadProfileRecord],
    bounds: NormalizationBounds,
    window_days: int = 24,
    stride_days: int = 6,
) -> list[LoadImage]:
    """Slide a window over every record; ordered by household id then start day."""
    images = []
    for rec in sorted(records, key=lambda r: r.household_id):
        for d in window_starts(rec.days, window_days, stride_days):
            images.append(profile_to_image(rec, bounds, d, window_days)[0])
    return images


# ---------------------------------------------------------------------------
# file formats


def _fmt_time(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_records_csv(records: Sequence[LoadProfileRecord], path: Path) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(CSV_HEADER) + "\n")
            for rec in records:
                n = len(rec.net_load)
                pv_flag = "1" if rec.has_pv else "0"
                ev_flag = "1" if rec.has_ev else "0"
                buf = io.StringIO()
                cols = [a.tolist() for a in (rec.net_load, rec.temperature, rec.irradiance,
                                             rec.hvac, rec.ev, rec.pv)]
                for i in range(n):
                    ts = _fmt_time(rec.start_time + timedelta(hours=i))
                    vals = ",".join(repr(c[i]) for c in cols)
                    buf.write(f"{rec.household_id},{ts},{vals},{pv_flag},{ev_flag}\n")
                fh.write(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc.strerror}") from exc


def read_records_csv(path: Path) -> list[LoadProfileRecord]:
    """Parse the hourly dataset CSV back into records (one per household)."""
    import pandas as pd

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path) as fh:
        header = next(csv.reader(fh), [])
    if tuple(header) != CSV_HEADER:
        raise ValidationError(f"{path}: unexpected header {header}")
    df = pd.read_csv(
        path,
        dtype={"household_id": str},
        float_precision="round_trip",
        keep_default_na=False,
    )
    try:
        records = _records_from_frame(df)
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed dataset row ({exc})") from exc
    return records


def _records_from_frame(df) -> list[LoadProfileRecord]:
    records = []
    for hid, g in df.groupby("household_id", sort=True):
        start = datetime.strptime(g["timestamp"].iloc[0], "%Y-%m-%dT%H:%M:%SZ").replace(
            tzinfo=timezone.utc
        )
        net = g["net_kw"].to_numpy(np.float64)
        hvac = g["hvac_kw"].to_numpy(np.float64)
        ev = g["ev_kw"].to_numpy(np.float64)
        pv = g["pv_kw"].to_numpy(np.float64)
        records.append(
            LoadProfileRecord(
                household_id=str(hid),
                start_time=start,
                net_load=net,
                temperature=g["temp_c"].to_numpy(np.float64),
                irradiance=g["ghi_wm2"].to_numpy(np.float64),
                hvac=hvac,
                ev=ev,
                pv=pv,
                has_pv=bool(g["has_pv"].iloc[0]),
                has_ev=bool(g["has_ev"].iloc[0]),
                base=net - hvac - ev + pv,
            )
        )
    return records


@dataclass
class DatasetManifest:
    bounds: NormalizationBounds
    train_households: list[str]
    test_households: list[str]
    extra: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in self.bounds.to_items()]
        lines.append(f"split.train = {','.join(self.train_households)}")
        lines.append(f"split.test = {','.join(self.test_households)}")
        for k in sorted(self.extra):
            lines.append(f"{k} = {self.extra[k]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        items = parse_key_values(text)
        bounds = NormalizationBounds.from_items(items)
        train = [h for h in items.get("split.train", "").split(",") if h]
        test = [h for h in items.get("split.test", "").split(",") if h]
        overlap = set(train) & set(test)
        if overlap:
            raise ValidationError(f"manifest split is not disjoint: {sorted(overlap)[:5]}")
        known = {k for k, _ in bounds.to_items()} | {"split.train", "split.test"}
        extra = {k: v for k, v in items.items() if k not in known}
        return cls(bounds, train, test, extra)

    def write(self, path: Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path: Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        return cls.from_text(path.read_text())


def parse_key_values(text: str) -> dict[str, str]:
    items = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return items


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def with_arrays(record: LoadProfileRecord, **arrays) -> LoadProfileRecord:
    return replace(record, **arrays)
