"""Task and image metadata models, file parsers, and geodesic helpers."""

from __future__ import annotations

import datetime as _dt
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import (
    ConstraintViolation,
    DegeneratePair,
    DuplicatePid,
    MalformedField,
    MalformedRecord,
    MissingField,
)

EARTH_RADIUS_M = 6_371_000.0
TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"non-finite coordinate ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"longitude {lon} outside [-180, 180]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)


@dataclass(frozen=True, order=True)
class Timestamp:
    """Calendar instant at minute precision, canonical form ``YYYYMMDDhhmm``."""

    year: int
    month: int
    day: int
    hour: int
    minute: int

    def __post_init__(self):
        # datetime does the calendar validation (leap years etc.)
        _dt.datetime(self.year, self.month, self.day, self.hour, self.minute)

    @classmethod
    def parse(cls, text: str, year: Optional[int] = None) -> "Timestamp":
        """Parse a 12-digit string, or an 8-digit ``MMDDhhmm`` one given `year`."""
        s = str(text).strip()
        if not s.isdigit():
            raise ValueError(f"timestamp {text!r} is not numeric")
        if len(s) == 8:
            if year is None:
                raise ValueError(f"8-digit timestamp {text!r} needs an explicit year")
            s = f"{int(year):04d}{s}"
        if len(s) != 12:
            raise ValueError(f"timestamp {text!r} must have 12 digits")
        return cls(int(s[0:4]), int(s[4:6]), int(s[6:8]), int(s[8:10]), int(s[10:12]))

    def __str__(self) -> str:
        return (f"{self.year:04d}{self.month:02d}{self.day:02d}"
                f"{self.hour:02d}{self.minute:02d}")


@dataclass(frozen=True)
class Resolution:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("resolution must be integral")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"resolution {self.width}x{self.height} must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def p_class(self) -> int:
        return min(self.width, self.height)


def _normalize_format(ext: str) -> str:
    ext = ext.strip().lower()
    if not ext:
        raise ValueError("empty format")
    return ext if ext.startswith(".") else "." + ext


@dataclass(frozen=True)
class TaskSpec:
    tid: int
    formats: frozenset
    whr: GeoPoint
    whn: tuple
    d_max: float
    d_min: float = 0.0
    ang_inter: Optional[float] = None
    alt_range: Optional[tuple] = None
    resol_min: int = 360

    def __post_init__(self):
        formats = frozenset(_normalize_format(f) for f in self.formats)
        if not formats:
            raise ConstraintViolation("formats must be non-empty")
        object.__setattr__(self, "formats", formats)
        start, end = self.whn
        if start > end:
            raise ConstraintViolation(f"time window start {start} is after end {end}")
        if not (math.isfinite(self.d_max) and self.d_max > 0):
            raise ConstraintViolation(f"d_max must be > 0, got {self.d_max}")
        if not (math.isfinite(self.d_min) and self.d_min >= 0):
            raise ConstraintViolation(f"d_min must be >= 0, got {self.d_min}")
        if self.d_min > self.d_max:
            raise ConstraintViolation(f"d_min {self.d_min} exceeds d_max {self.d_max}")
        if self.ang_inter is not None and not (math.isfinite(self.ang_inter) and self.ang_inter > 0):
            raise ConstraintViolation(f"ang_inter must be > 0, got {self.ang_inter}")
        if self.alt_range is not None:
            lo, hi = (float(v) for v in self.alt_range)
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ConstraintViolation("alt_range must be finite")
            if lo > hi:
                raise ConstraintViolation(f"alt_range ({lo}, {hi}) is inverted")
            object.__setattr__(self, "alt_range", (lo, hi))
        if self.resol_min < 0:
            raise ConstraintViolation(f"resol_min must be >= 0, got {self.resol_min}")


@dataclass(frozen=True)
class ImageRecord:
    pid: int
    tid: int
    wid: int
    format: str
    time: Timestamp
    locat: GeoPoint
    heig: float
    resol: Resolution
    heading: Optional[float] = None
    path: Optional[str] = field(default=None, compare=True)

    def __post_init__(self):
        for name in ("pid", "tid", "wid"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if not math.isfinite(self.heig):
            raise ValueError(f"altitude must be finite, got {self.heig}")
        if self.heading is not None:
            h = float(self.heading)
            if not math.isfinite(h):
                raise ValueError(f"heading must be finite, got {h}")
            h = math.fmod(h, TWO_PI)
            if h < 0:
                h += TWO_PI
            if h >= TWO_PI:
                h = 0.0
            object.__setattr__(self, "heading", h)


# ---------------------------------------------------------------------------
# geodesy
# ---------------------------------------------------------------------------

def geo_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine great-circle distance in meters."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def geo_bearing(src: GeoPoint, dst: GeoPoint) -> float:
    """Initial great-circle bearing from `src` to `dst`.

    Radians in [0, 2pi), 0 is due north and angles grow clockwise.
    Raises DegeneratePair when the points coincide.
    """
    if abs(src.lat - dst.lat) < 1e-9 and abs(src.lon - dst.lon) < 1e-9:
        raise DegeneratePair(f"bearing undefined between coincident points {src}")
    phi1, phi2 = math.radians(src.lat), math.radians(dst.lat)
    dlam = math.radians(dst.lon - src.lon)
    y = math.sin(dlam) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlam)
    theta = math.atan2(y, x) % TWO_PI
    return 0.0 if theta >= TWO_PI else theta


def local_offsets(points: Iterable[GeoPoint], origin: GeoPoint) -> np.ndarray:
    """East/north offsets in meters, equirectangular projection about `origin`.

    Returns an (n, 2) array.
    """
    pts = list(points)
    if not pts:
        return np.zeros((0, 2))
    lat = np.radians([p.lat for p in pts])
    lon = np.array([p.lon for p in pts], dtype=float)
    dlon = (lon - origin.lon + 180.0) % 360.0 - 180.0
    east = EARTH_RADIUS_M * np.radians(dlon) * math.cos(math.radians(origin.lat))
    north = EARTH_RADIUS_M * (lat - math.radians(origin.lat))
    return np.column_stack([east, north])


def offset_point(origin: GeoPoint, east_m: float, north_m: float) -> GeoPoint:
    """Inverse of :func:`local_offsets` for a single point."""
    lat = origin.lat + math.degrees(north_m / EARTH_RADIUS_M)
    lon = origin.lon + math.degrees(east_m / (EARTH_RADIUS_M * math.cos(math.radians(origin.lat))))
    return GeoPoint(lat, lon)


# ---------------------------------------------------------------------------
# task file
# ---------------------------------------------------------------------------

_TASK_KEYS = ("tid", "formats", "whr", "whn", "year", "ang_inter",
              "alt_range", "d_min", "d_max", "resol_min")
_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_PI_EXPR = re.compile(rf"^(?P<coef>{_NUM})?\s*\*?\s*(?:pi|π)\s*(?:/\s*(?P<den>{_NUM}))?$")


def _strip_brackets(value: str) -> str:
    value = value.strip()
    if len(value) >= 2 and value[0] in "([" and value[-1] in ")]":
        value = value[1:-1]
    return value


def _pair(key: str, value: str) -> list:
    parts = [p.strip() for p in _strip_brackets(value).split(",")]
    if len(parts) != 2 or not all(parts):
        raise MalformedField(key, value, "expected two comma-separated values")
    return parts


def _float(key: str, value: str) -> float:
    v = value.strip()
    if v.endswith("m") and not v.endswith("pm"):
        v = v[:-1]
    try:
        out = float(v)
    except ValueError:
        raise MalformedField(key, value) from None
    if not math.isfinite(out):
        raise MalformedField(key, value, "not finite")
    return out


def _angle(key: str, value: str) -> float:
    v = value.strip().lower().replace(" ", "")
    m = _PI_EXPR.match(v)
    if m:
        coef = float(m.group("coef")) if m.group("coef") else 1.0
        den = float(m.group("den")) if m.group("den") else 1.0
        if den == 0:
            raise MalformedField(key, value, "division by zero")
        return coef * math.pi / den
    return _float(key, value)


def _coordinate(key: str, value: str, positive: str, negative: str) -> float:
    v = value.strip().upper()
    sign = 1.0
    if v and v[0] in (positive, negative):
        sign = -1.0 if v[0] == negative else 1.0
        v = v[1:]
    return sign * _float(key, v)


def parse_task_spec(text: str) -> TaskSpec:
    """Parse a ``key = value`` task document into a validated TaskSpec."""
    raw = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedField(f"line {line_no}", line, "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TASK_KEYS:
            raise MalformedField(key, value, "unknown key")
        if key in raw:
            raise MalformedField(key, value, "repeated key")
        raw[key] = value

    for key in ("tid", "formats", "whr", "whn", "d_max"):
        if key not in raw:
            raise MissingField(key)

    try:
        tid = int(raw["tid"])
    except ValueError:
        raise MalformedField("tid", raw["tid"]) from None
    if tid < 0:
        raise MalformedField("tid", raw["tid"], "must be non-negative")

    formats = [f for f in _strip_brackets(raw["formats"]).split(",") if f.strip()]
    if not formats:
        raise ConstraintViolation("formats must be non-empty")
    formats = frozenset(_normalize_format(f) for f in formats)

    lat_s, lon_s = _pair("whr", raw["whr"])
    try:
        whr = GeoPoint(_coordinate("whr", lat_s, "N", "S"), _coordinate("whr", lon_s, "E", "W"))
    except ValueError as exc:
        raise MalformedField("whr", raw["whr"], str(exc)) from None

    start_s, end_s = _pair("whn", raw["whn"])
    year = None
    if "year" in raw:
        try:
            year = int(raw["year"])
        except ValueError:
            raise MalformedField("year", raw["year"]) from None
    if year is None and (len(start_s) == 8 or len(end_s) == 8):
        raise MissingField("year")
    try:
        whn = (Timestamp.parse(start_s, year), Timestamp.parse(end_s, year))
    except ValueError as exc:
        raise MalformedField("whn", raw["whn"], str(exc)) from None

    ang_inter = _angle("ang_inter", raw["ang_inter"]) if "ang_inter" in raw else None
    alt_range = None
    if "alt_range" in raw:
        lo, hi = _pair("alt_range", raw["alt_range"])
        alt_range = (_float("alt_range", lo), _float("alt_range", hi))

    d_max = _float("d_max", raw["d_max"])
    d_min = _float("d_min", raw["d_min"]) if "d_min" in raw else 0.0
    resol_min = 360
    if "resol_min" in raw:
        r = raw["resol_min"].strip().lower().rstrip("p")
        try:
            resol_min = int(r)
        except ValueError:
            raise MalformedField("resol_min", raw["resol_min"]) from None

    return TaskSpec(tid=tid, formats=formats, whr=whr, whn=whn, d_max=d_max,
                    d_min=d_min, ang_inter=ang_inter, alt_range=alt_range,
                    resol_min=resol_min)


def serialize_task_spec(task: TaskSpec) -> str:
    lines = [
        f"tid = {task.tid}",
        f"formats = {', '.join(sorted(task.formats))}",
        f"whr = {task.whr.lat!r}, {task.whr.lon!r}",
        f"whn = {task.whn[0]}, {task.whn[1]}",
    ]
    if task.ang_inter is not None:
        lines.append(f"ang_inter = {task.ang_inter!r}")
    if task.alt_range is not None:
        lines.append(f"alt_range = {task.alt_range[0]!r}, {task.alt_range[1]!r}")
    lines += [
        f"d_min = {task.d_min!r}",
        f"d_max = {task.d_max!r}",
        f"resol_min = {task.resol_min}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

MANIFEST_KEYS = ("pid", "tid", "wid", "format", "time", "lat", "lon", "heig",
                 "width", "height", "heading", "path")
_REQUIRED_MANIFEST_KEYS = MANIFEST_KEYS[:10]


class Manifest(list):
    """List of ImageRecords that also carries parse diagnostics.

    ``unknown_keys`` counts every ignored key, by name.
    """

    def __init__(self, records=(), unknown_keys=None):
        super().__init__(records)
        self.unknown_keys = Counter(unknown_keys or {})

    @property
    def warning_count(self) -> int:
        return sum(self.unknown_keys.values())


def _int_field(obj, key):
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ValueError(f"{key} must be an integer, got {v!r}")
    return int(v)


def _float_field(obj, key):
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"{key} must be a number, got {v!r}")
    return float(v)


def record_from_dict(obj: dict) -> ImageRecord:
    missing = [k for k in _REQUIRED_MANIFEST_KEYS if k not in obj]
    if missing:
        raise ValueError(f"missing keys {missing}")
    if not isinstance(obj["format"], str):
        raise ValueError("format must be a string")
    heading = obj.get("heading")
    path = obj.get("path")
    if path is not None and not isinstance(path, str):
        raise ValueError("path must be a string")
    return ImageRecord(
        pid=_int_field(obj, "pid"),
        tid=_int_field(obj, "tid"),
        wid=_int_field(obj, "wid"),
        format=obj["format"],
        time=Timestamp.parse(str(obj["time"])),
        locat=GeoPoint(_float_field(obj, "lat"), _float_field(obj, "lon")),
        heig=_float_field(obj, "heig"),
        resol=Resolution(_int_field(obj, "width"), _int_field(obj, "height")),
        heading=None if heading is None else _float_field(obj, "heading"),
        path=path,
    )


def record_to_dict(r: ImageRecord) -> dict:
    out = {
        "pid": r.pid, "tid": r.tid, "wid": r.wid, "format": r.format,
        "time": str(r.time), "lat": r.locat.lat, "lon": r.locat.lon,
        "heig": r.heig, "width": r.resol.width, "height": r.resol.height,
    }
    if r.heading is not None:
        out["heading"] = r.heading
    if r.path is not None:
        out["path"] = r.path
    return out


def parse_manifest(text: str) -> Manifest:
    """Parse newline-delimited JSON image records, preserving file order."""
    records = []
    unknown = Counter()
    seen = set()
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(line_no, f"invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise MalformedRecord(line_no, "record is not a JSON object")
        try:
            rec = record_from_dict(obj)
        except (ValueError, TypeError) as exc:
            raise MalformedRecord(line_no, str(exc)) from None
        if rec.pid in seen:
            raise DuplicatePid(rec.pid)
        seen.add(rec.pid)
        unknown.update(k for k in obj if k not in MANIFEST_KEYS)
        records.append(rec)
    return Manifest(records, unknown)


def serialize_manifest(records: Iterable[ImageRecord]) -> str:
    return "".join(json.dumps(record_to_dict(r), sort_keys=False) + "\n" for r in records)
