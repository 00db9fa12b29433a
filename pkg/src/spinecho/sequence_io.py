"""Line-oriented `key value unit` grammar for sequence and config files.

Files are UTF-8 text; a line is blank, a comment (#...), a section header
([name]) or a directive `key value [unit]`. Units are restricted to uT, ms,
rad and deg; dimensionless keys (counts, enumerations) take no unit token.
Every rejection carries a Diagnostic with a stable code and the 1-based
line/column of the offending token; no input text raises anything else.

The serializer emits a canonical form: fixed key order per section, values
at 9 significant digits, uT/ms/rad units, LF line endings. Parsing a
canonical file and re-serializing reproduces it byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from typing import Any

from . import errors as E
from .errors import Diagnostic, SequenceParseError
from .waveform import (ConicalSegment, EchoSequence, RfPulseSegment,
                       StaticSegment, TiltSegment, build_echo_sequence,
                       design_pi2_pulse, design_pi_pulse)

_UNITS = {
    "field": {"uT": 1e-6},
    "time": {"ms": 1e-3},
    "angle": {"rad": 1.0, "deg": math.pi / 180.0},
}
_ALL_UNITS = {u for t in _UNITS.values() for u in t}


@dataclass(frozen=True)
class _Entry:
    key: str
    value: str
    unit: str | None
    line: int
    col_key: int
    col_value: int
    col_unit: int


@dataclass(frozen=True)
class _Section:
    name: str
    line: int
    entries: tuple[_Entry, ...]


def _fail(code: str, line: int, col: int, message: str) -> None:
    raise SequenceParseError(Diagnostic(code, line, col, message))


def tokenize(text: str) -> list[_Section]:
    """Split text into sections of key/value entries (grammar level only)."""
    sections: list[_Section] = []
    current: list[_Entry] | None = None
    current_name = ""
    current_line = 0

    def flush() -> None:
        nonlocal current
        if current is not None:
            sections.append(_Section(current_name, current_line, tuple(current)))

    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        stripped = line.strip()
        col = raw.index(stripped[0]) + 1
        if stripped.startswith("["):
            if not stripped.endswith("]") or len(stripped) < 3:
                _fail(E.E_SYNTAX, ln, col, f"malformed section header {stripped!r}")
            flush()
            current = []
            current_name = stripped[1:-1].strip()
            current_line = ln
            continue
        parts = stripped.split()
        if current is None:
            _fail(E.E_SYNTAX, ln, col, "directive before any section header")
        if len(parts) < 2 or len(parts) > 3:
            _fail(E.E_SYNTAX, ln, col,
                  "expected `key value [unit]`, got " + repr(stripped))
        key, value = parts[0], parts[1]
        unit = parts[2] if len(parts) == 3 else None
        c_key = raw.index(key) + 1
        c_val = raw.index(value, c_key) + 1
        c_unit = raw.index(unit, c_val) + 1 if unit else c_val
        current.append(_Entry(key, value, unit, ln, c_key, c_val, c_unit))
    flush()
    return sections


@dataclass(frozen=True)
class Field:
    """Schema entry: how to read one key."""

    kind: str                      # quantity | int | float | word
    dimension: str | None = None   # for quantities: field | time | angle
    required: bool = False
    default: Any = None
    choices: tuple[str, ...] | None = None
    repeated: bool = False


def _read_value(entry: _Entry, spec: Field) -> Any:
    if spec.kind == "word":
        if entry.unit is not None:
            _fail(E.E_UNIT_MISMATCH, entry.line, entry.col_unit,
                  f"{entry.key} takes no unit")
        if spec.choices and entry.value not in spec.choices:
            _fail(E.E_BAD_VALUE, entry.line, entry.col_value,
                  f"{entry.key} must be one of {', '.join(spec.choices)}")
        return entry.value
    if spec.kind == "int":
        if entry.unit is not None:
            _fail(E.E_UNIT_MISMATCH, entry.line, entry.col_unit,
                  f"{entry.key} takes no unit")
        try:
            return int(entry.value)
        except ValueError:
            _fail(E.E_BAD_VALUE, entry.line, entry.col_value,
                  f"{entry.key} expects an integer, got {entry.value!r}")
    try:
        magnitude = float(entry.value)
    except ValueError:
        _fail(E.E_BAD_VALUE, entry.line, entry.col_value,
              f"{entry.key} expects a number, got {entry.value!r}")
    if not math.isfinite(magnitude):
        _fail(E.E_BAD_VALUE, entry.line, entry.col_value,
              f"{entry.key} must be finite")
    if spec.kind == "float":
        if entry.unit is not None:
            _fail(E.E_UNIT_MISMATCH, entry.line, entry.col_unit,
                  f"{entry.key} takes no unit")
        return magnitude
    # quantity
    if entry.unit is None:
        _fail(E.E_UNIT_MISMATCH, entry.line, entry.col_value,
              f"{entry.key} needs a {spec.dimension} unit")
    if entry.unit not in _ALL_UNITS:
        _fail(E.E_UNKNOWN_UNIT, entry.line, entry.col_unit,
              f"unknown unit {entry.unit!r} (allowed: uT, ms, rad, deg)")
    table = _UNITS[spec.dimension]
    if entry.unit not in table:
        _fail(E.E_UNIT_MISMATCH, entry.line, entry.col_unit,
              f"{entry.key} needs a {spec.dimension} unit, got {entry.unit!r}")
    scale = table[entry.unit]
    if entry.unit in ("uT", "ms"):
        # decimal-exact power-of-ten scaling so that e.g. "-10 uT" parses
        # to the same double as the literal -10e-6
        try:
            return float(Decimal(entry.value) * Decimal(repr(scale)))
        except InvalidOperation:  # pragma: no cover - caught as float above
            pass
    return magnitude * scale


def read_section(section: _Section, schema: dict[str, Field]) -> dict[str, Any]:
    """Apply a schema to one section, returning key -> value."""
    out: dict[str, Any] = {}
    for entry in section.entries:
        if entry.key not in schema:
            _fail(E.E_UNKNOWN_KEY, entry.line, entry.col_key,
                  f"unknown key {entry.key!r} in [{section.name}]")
        spec = schema[entry.key]
        val = _read_value(entry, spec)
        if spec.kind == "quantity" and spec.dimension == "time" and val < 0:
            _fail(E.E_NEGATIVE_DURATION, entry.line, entry.col_value,
                  f"{entry.key} must not be negative")
        if spec.repeated:
            out.setdefault(entry.key, []).append(val)
        elif entry.key in out:
            _fail(E.E_DUPLICATE_KEY, entry.line, entry.col_key,
                  f"duplicate key {entry.key!r}")
        else:
            out[entry.key] = val
    for key, spec in schema.items():
        if key not in out:
            if spec.required:
                _fail(E.E_MISSING_KEY, section.line, 1,
                      f"[{section.name}] is missing required key {key!r}")
            if spec.default is not None or not spec.repeated:
                out[key] = spec.default
            else:
                out[key] = []
    return out


_ECHO_SCHEMA = {
    "guide_bz": Field("quantity", "field", required=True),
    "rf_amplitude": Field("quantity", "field", required=True),
    "offset_bx": Field("quantity", "field", required=True),
    "cycle_time": Field("quantity", "time", required=True),
    "ramp_time": Field("quantity", "time"),
    "direction": Field("int", default=1),
    "mode": Field("word", choices=("geometric", "dynamical"), default="geometric"),
    "cycles": Field("int", default=1),
    "analysis": Field("word", choices=("none", "x", "y"), default="none"),
}

_STATIC_SCHEMA = {
    "bx": Field("quantity", "field", default=0.0),
    "by": Field("quantity", "field", default=0.0),
    "bz": Field("quantity", "field", default=0.0),
    "duration": Field("quantity", "time", required=True),
}

_RF_SCHEMA = {
    "axis": Field("word", choices=("x", "y"), default="x"),
    "amplitude": Field("quantity", "field", required=True),
    "guide_bz": Field("quantity", "field", required=True),
    "kind": Field("word", choices=("pi2", "pi")),
    "duration": Field("quantity", "time"),
    "phase": Field("quantity", "angle"),
}

_CONE_SCHEMA = {
    "guide_bz": Field("quantity", "field", required=True),
    "offset_bx": Field("quantity", "field", required=True),
    "cycle_time": Field("quantity", "time", required=True),
    "direction": Field("int", default=1),
    "cycles": Field("int", default=1),
}

_TURN_SCHEMA = {
    "from_bx": Field("quantity", "field", default=0.0),
    "from_by": Field("quantity", "field", default=0.0),
    "from_bz": Field("quantity", "field", default=0.0),
    "to_bx": Field("quantity", "field", default=0.0),
    "to_by": Field("quantity", "field", default=0.0),
    "to_bz": Field("quantity", "field", default=0.0),
    "duration": Field("quantity", "time", required=True),
}


def _invariant(section: _Section, ok: bool, message: str) -> None:
    if not ok:
        _fail(E.E_INVARIANT, section.line, 1, message)


def parse_sequence(text: str) -> EchoSequence:
    """Parse a sequence description into an EchoSequence.

    A single [echo] section assembles the full experiment; otherwise the
    file lists raw [static]/[rf]/[cone]/[turn] sections in order.
    """
    sections = tokenize(text)
    if not sections:
        _fail(E.E_SYNTAX, 1, 1, "empty sequence file")
    names = [s.name for s in sections]
    if "echo" in names:
        if len(sections) != 1:
            _fail(E.E_INVARIANT, sections[0].line, 1,
                  "[echo] must be the only section in a sequence file")
        sec = sections[0]
        kv = read_section(sec, _ECHO_SCHEMA)
        _invariant(sec, kv["direction"] in (1, -1), "direction must be +1 or -1")
        _invariant(sec, kv["cycles"] >= 1, "cycles must be >= 1")
        _invariant(sec, kv["rf_amplitude"] > 0, "rf_amplitude must be positive")
        _invariant(sec, kv["guide_bz"] != 0, "guide_bz must be nonzero")
        _invariant(sec, kv["offset_bx"] >= 0, "offset_bx must be >= 0")
        _invariant(sec, kv["cycle_time"] > 0, "cycle_time must be positive")
        try:
            return build_echo_sequence(
                guide_bz=kv["guide_bz"], rf_amplitude=kv["rf_amplitude"],
                offset_bx=kv["offset_bx"], cycle_time=kv["cycle_time"],
                ramp_time=kv["ramp_time"], direction=kv["direction"],
                mode=kv["mode"], cycles=kv["cycles"], analysis=kv["analysis"])
        except E.ConfigurationError as exc:
            _fail(E.E_INVARIANT, sec.line, 1, str(exc))

    segments = []
    for sec in sections:
        try:
            if sec.name == "static":
                kv = read_section(sec, _STATIC_SCHEMA)
                segments.append(StaticSegment((kv["bx"], kv["by"], kv["bz"]),
                                              kv["duration"]))
            elif sec.name == "rf":
                kv = read_section(sec, _RF_SCHEMA)
                if kv["kind"] is None and kv["duration"] is None:
                    _fail(E.E_MISSING_KEY, sec.line, 1,
                          "[rf] needs either kind (pi2|pi) or an explicit duration")
                _invariant(sec, kv["amplitude"] > 0, "amplitude must be positive")
                _invariant(sec, kv["guide_bz"] != 0, "guide_bz must be nonzero")
                if kv["kind"] is not None:
                    builder = design_pi2_pulse if kv["kind"] == "pi2" else design_pi_pulse
                    pulse = builder(kv["guide_bz"], kv["amplitude"])
                    if kv["phase"] is not None:
                        pulse = RfPulseSegment(
                            axis=kv["axis"], amplitude=pulse.amplitude,
                            carrier_frequency=pulse.carrier_frequency,
                            carrier_phase=kv["phase"], duration=pulse.duration,
                            background=pulse.background)
                    elif kv["axis"] != pulse.axis:
                        pulse = RfPulseSegment(
                            axis=kv["axis"], amplitude=pulse.amplitude,
                            carrier_frequency=pulse.carrier_frequency,
                            carrier_phase=pulse.carrier_phase,
                            duration=pulse.duration, background=pulse.background)
                    segments.append(pulse)
                else:
                    from .constants import NEUTRON
                    carrier = abs(NEUTRON.gamma) * abs(kv["guide_bz"])
                    phase = kv["phase"] if kv["phase"] is not None else -math.pi / 2
                    segments.append(RfPulseSegment(
                        axis=kv["axis"], amplitude=kv["amplitude"],
                        carrier_frequency=carrier, carrier_phase=phase,
                        duration=kv["duration"],
                        background=(0.0, 0.0, kv["guide_bz"])))
            elif sec.name == "cone":
                kv = read_section(sec, _CONE_SCHEMA)
                _invariant(sec, kv["direction"] in (1, -1), "direction must be +1 or -1")
                _invariant(sec, kv["cycles"] >= 1, "cycles must be >= 1")
                _invariant(sec, kv["guide_bz"] != 0, "guide_bz must be nonzero")
                _invariant(sec, kv["offset_bx"] >= 0, "offset_bx must be >= 0")
                _invariant(sec, kv["cycle_time"] > 0, "cycle_time must be positive")
                segments.append(ConicalSegment(
                    guide_bz=kv["guide_bz"], offset_bx=kv["offset_bx"],
                    cycle_time=kv["cycle_time"], direction=kv["direction"],
                    cycles=kv["cycles"]))
            elif sec.name == "turn":
                kv = read_section(sec, _TURN_SCHEMA)
                _invariant(sec, kv["duration"] > 0, "turn duration must be positive")
                segments.append(TiltSegment(
                    (kv["from_bx"], kv["from_by"], kv["from_bz"]),
                    (kv["to_bx"], kv["to_by"], kv["to_bz"]), kv["duration"]))
            else:
                _fail(E.E_UNKNOWN_SECTION, sec.line, 1,
                      f"unknown section [{sec.name}]")
        except SequenceParseError:
            raise
        except (E.ConfigurationError, E.InvalidInputError) as exc:
            _fail(E.E_INVARIANT, sec.line, 1, str(exc))
    return EchoSequence(segments=tuple(segments))


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def serialize_sequence(seq: EchoSequence) -> str:
    """Canonical text form of a sequence (see parse_sequence)."""
    lines: list[str] = []
    if seq.guide_bz is not None and seq.mode is not None:
        lines.append("[echo]")
        lines.append(f"guide_bz {_fmt(seq.guide_bz / 1e-6)} uT")
        lines.append(f"rf_amplitude {_fmt(seq.rf_amplitude / 1e-6)} uT")
        lines.append(f"offset_bx {_fmt(seq.offset_bx / 1e-6)} uT")
        lines.append(f"cycle_time {_fmt(seq.cycle_time / 1e-3)} ms")
        lines.append(f"ramp_time {_fmt(seq.ramp_time / 1e-3)} ms")
        lines.append(f"direction {seq.direction}")
        lines.append(f"mode {seq.mode}")
        lines.append(f"cycles {seq.cycles}")
        lines.append(f"analysis {seq.analysis}")
        return "\n".join(lines) + "\n"
    for seg in seq.segments:
        if isinstance(seg, StaticSegment):
            lines.append("[static]")
            for key, v in zip(("bx", "by", "bz"), seg.fieldvec):
                lines.append(f"{key} {_fmt(v / 1e-6)} uT")
            lines.append(f"duration {_fmt(seg.duration / 1e-3)} ms")
        elif isinstance(seg, RfPulseSegment):
            lines.append("[rf]")
            lines.append(f"axis {seg.axis}")
            lines.append(f"amplitude {_fmt(seg.amplitude / 1e-6)} uT")
            lines.append(f"guide_bz {_fmt(seg.background[2] / 1e-6)} uT")
            lines.append(f"duration {_fmt(seg.duration / 1e-3)} ms")
            lines.append(f"phase {_fmt(seg.carrier_phase)} rad")
        elif isinstance(seg, ConicalSegment):
            lines.append("[cone]")
            lines.append(f"guide_bz {_fmt(seg.guide_bz / 1e-6)} uT")
            lines.append(f"offset_bx {_fmt(seg.offset_bx / 1e-6)} uT")
            lines.append(f"cycle_time {_fmt(seg.cycle_time / 1e-3)} ms")
            lines.append(f"direction {seg.direction}")
            lines.append(f"cycles {seg.cycles}")
        elif isinstance(seg, TiltSegment):
            lines.append("[turn]")
            for key, v in zip(("from_bx", "from_by", "from_bz"), seg.start_field):
                lines.append(f"{key} {_fmt(v / 1e-6)} uT")
            for key, v in zip(("to_bx", "to_by", "to_bz"), seg.end_field):
                lines.append(f"{key} {_fmt(v / 1e-6)} uT")
            lines.append(f"duration {_fmt(seg.duration / 1e-3)} ms")
        else:  # pragma: no cover
            raise E.ConfigurationError(f"cannot serialize segment {seg!r}")
    return "\n".join(lines) + "\n"
