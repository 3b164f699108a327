"""Reading and writing power-system case data.

Two formats are understood:

* MATPOWER-style text (``.m``): ``mpc.baseMVA = <number>;`` and the
  ``mpc.bus``, ``mpc.gen``, ``mpc.branch`` and ``mpc.gencost`` matrices.
  Rows end with ``;`` or a newline, ``%`` starts a comment, and anything
  else (``function`` lines, ``mpc.version``, cell arrays such as
  ``mpc.bus_name``) is skipped.
* A canonical JSON format whose field names mirror :class:`CaseData`.

Column layout (1-based, MATPOWER version 2)::

    bus     1 id  2 type  3 Pd  4 Qd  5 Gs  6 Bs  7 area  8 Vm  9 Va
            10 baseKV  11 zone  12 Vmax  13 Vmin              (13 required)
    gen     1 bus  2 Pg  3 Qg  4 Qmax  5 Qmin  6 Vg  7 mBase  8 status
            9 Pmax  10 Pmin                                   (10 required)
    branch  1 from  2 to  3 r  4 x  5 b  6 rateA  7 rateB  8 rateC
            9 tap  10 shift  11 status                        (5 required)
    gencost 1 model  2 startup  3 shutdown  4 n  5.. c(n-1) ... c0

Missing optional branch columns default to rateA = 0 (unlimited),
tap = 0 (read as 1), shift = 0 and status = 1.  Only polynomial cost rows
(model 2) of degree at most two are accepted.

Bus types follow MATPOWER: 1 = PQ, 2 = PV, 3 = slack (reference).
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "CaseParseError",
    "CaseValidationError",
    "BusRecord",
    "BranchRecord",
    "GenRecord",
    "CostRecord",
    "CaseData",
    "NetworkData",
    "parse_matpower",
    "serialize_matpower",
    "case_to_json",
    "case_from_json",
    "load_case",
    "bundled_case",
    "BUNDLED_CASES",
    "to_network",
    "from_network",
]

DATA_DIR = Path(__file__).parent / "data"
BUNDLED_CASES = ("ieee14", "ieee30", "ieee57", "ieee118")

BUS_TYPES = {1: "PQ", 2: "PV", 3: "slack", 4: "isolated"}
_BUS_CODES = {v: k for k, v in BUS_TYPES.items()}


class CaseParseError(ValueError):
    """Malformed case text.  ``line`` is 1-based, or None if not local."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CaseValidationError(ValueError):
    """Parsed data violates a case invariant."""


@dataclass(frozen=True)
class BusRecord:
    id: int
    type: str  # "slack" | "PV" | "PQ"
    pd: float  # MW
    qd: float  # MVAr
    gs: float = 0.0  # MW at 1 p.u. voltage
    bs: float = 0.0  # MVAr at 1 p.u. voltage
    vmin: float = 0.94
    vmax: float = 1.06
    base_kv: float = 0.0


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0  # total line charging, p.u.
    rate_a: float = 0.0  # MVA, 0 = unlimited
    tap: float = 1.0
    shift: float = 0.0  # degrees
    status: int = 1


@dataclass(frozen=True)
class GenRecord:
    bus: int
    pg: float
    qg: float
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    status: int = 1


@dataclass(frozen=True)
class CostRecord:
    generator: int  # 0-based position in CaseData.generators
    c2: float  # $/MW^2h
    c1: float  # $/MWh
    c0: float  # $/h


@dataclass(frozen=True)
class CaseData:
    base_mva: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    generators: tuple[GenRecord, ...]
    costs: tuple[CostRecord, ...]
    name: str = ""

    def __post_init__(self):
        _validate(self)

    @property
    def total_load_mw(self) -> float:
        return float(sum(b.pd for b in self.buses))


def _validate(case: CaseData) -> None:
    if not case.base_mva > 0:
        raise CaseValidationError("base_mva must be positive")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise CaseValidationError(f"duplicate bus id(s) {dup}")
    nslack = sum(b.type == "slack" for b in case.buses)
    if nslack != 1:
        raise CaseValidationError(f"expected exactly one slack bus, found {nslack}")
    known = set(ids)
    for b in case.buses:
        if b.type not in ("slack", "PV", "PQ"):
            raise CaseValidationError(f"bus {b.id}: unsupported type {b.type!r}")
        if b.vmin > b.vmax:
            raise CaseValidationError(f"bus {b.id}: Vmin > Vmax")
    for k, br in enumerate(case.branches):
        if br.from_bus not in known or br.to_bus not in known:
            raise CaseValidationError(f"branch {k}: unknown endpoint {br.from_bus}-{br.to_bus}")
    for i, g in enumerate(case.generators):
        if g.bus not in known:
            raise CaseValidationError(f"generator {i}: unknown bus {g.bus}")
        if g.pmin > g.pmax or g.qmin > g.qmax:
            raise CaseValidationError(f"generator {i}: inverted limits")
    costed = {c.generator for c in case.costs}
    for c in case.costs:
        if not 0 <= c.generator < len(case.generators):
            raise CaseValidationError(f"cost record for missing generator {c.generator}")
    missing = [i for i, g in enumerate(case.generators) if g.status and i not in costed]
    if missing:
        raise CaseValidationError(f"generator(s) {missing} have no cost record")


# --------------------------------------------------------------------------
# MATPOWER text

_MATRIX_START = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")
_SCALAR = re.compile(r"^\s*mpc\.baseMVA\s*=\s*([^;%]+);?")
_REQUIRED_COLS = {"bus": 13, "gen": 10, "branch": 5, "gencost": 4}


_warned: set[str] = set()


def _warn_once(msg: str) -> None:
    if msg not in _warned:
        _warned.add(msg)
        logger.warning(msg)


def _strip_comment(line: str) -> str:
    i = line.find("%")
    return line if i < 0 else line[:i]


def _read_matrices(text: str):
    base = None
    mats: dict[str, list[tuple[int, list[float]]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if current is None:
            m = _SCALAR.match(line)
            if m:
                try:
                    base = float(m.group(1))
                except ValueError:
                    raise CaseParseError(f"bad baseMVA value {m.group(1).strip()!r}", lineno) from None
                continue
            m = _MATRIX_START.match(line)
            if m is None:
                continue
            name = m.group(1)
            if name in mats:
                raise CaseParseError(f"matrix mpc.{name} defined twice", lineno)
            current = name
            mats[name] = []
            line = m.group(2)
        closing = "]" in line
        if closing:
            line = line[: line.index("]")]
        for chunk in line.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                mats[current].append((lineno, [float(t) for t in tokens]))
            except ValueError:
                bad = next(t for t in tokens if not _is_number(t))
                raise CaseParseError(f"non-numeric entry {bad!r} in mpc.{current}", lineno) from None
        if closing:
            current = None
    if current is not None:
        raise CaseParseError(f"unterminated matrix mpc.{current}")
    return base, mats


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def parse_matpower(text: str, name: str = "") -> CaseData:
    """Parse MATPOWER case text into :class:`CaseData`."""
    base, mats = _read_matrices(text)
    if base is None:
        raise CaseParseError("missing mpc.baseMVA")
    for req in ("bus", "gen", "branch", "gencost"):
        if req not in mats:
            raise CaseParseError(f"missing required matrix mpc.{req}")
    for mname, need in _REQUIRED_COLS.items():
        for lineno, row in mats[mname]:
            if len(row) < need:
                raise CaseParseError(f"mpc.{mname} row has {len(row)} columns, need {need}", lineno)

    buses = []
    seen = {}
    for lineno, r in mats["bus"]:
        bid = int(r[0])
        if bid in seen:
            raise CaseParseError(f"duplicate bus id {bid} (first on line {seen[bid]})", lineno)
        seen[bid] = lineno
        code = int(r[1])
        if code not in (1, 2, 3):
            raise CaseParseError(f"unsupported bus type {code}", lineno)
        buses.append(
            BusRecord(
                id=bid, type=BUS_TYPES[code], pd=r[2], qd=r[3], gs=r[4], bs=r[5],
                vmin=r[12], vmax=r[11], base_kv=r[9],
            )
        )
    _warn_once("ignored bus columns area/zone/Vm/Va (initial values are not used)")

    gens = [
        GenRecord(
            bus=int(r[0]), pg=r[1], qg=r[2], qmax=r[3], qmin=r[4],
            status=int(r[7]), pmax=r[8], pmin=r[9],
        )
        for _, r in mats["gen"]
    ]

    branches = []
    for lineno, r in mats["branch"]:
        col = lambda j, d: r[j] if len(r) > j else d  # noqa: E731
        branches.append(
            BranchRecord(
                from_bus=int(r[0]), to_bus=int(r[1]), r=r[2], x=r[3], b=r[4],
                rate_a=col(5, 0.0), tap=col(8, 0.0) or 1.0, shift=col(9, 0.0),
                status=int(col(10, 1)),
            )
        )

    costs = []
    cost_rows = mats["gencost"]
    if len(cost_rows) < len(gens):
        raise CaseParseError(f"mpc.gencost has {len(cost_rows)} rows for {len(gens)} generators")
    for i, (lineno, r) in enumerate(cost_rows[: len(gens)]):
        model, n = int(r[0]), int(r[3])
        if model != 2:
            raise CaseParseError("only polynomial cost rows (model 2) are supported", lineno)
        if n > 3:
            raise CaseParseError(f"cost polynomial of degree {n - 1} > 2", lineno)
        coeffs = r[4 : 4 + n]
        if len(coeffs) < n:
            raise CaseParseError("cost row shorter than its declared length", lineno)
        c = [0.0, 0.0, 0.0]  # c2, c1, c0
        for k, a in enumerate(reversed(coeffs)):
            c[2 - k] = a
        costs.append(CostRecord(generator=i, c2=c[0], c1=c[1], c0=c[2]))

    try:
        return CaseData(base, tuple(buses), tuple(branches), tuple(gens), tuple(costs), name=name)
    except CaseValidationError as exc:
        raise CaseParseError(str(exc)) from None


def _fmt(x: float) -> str:
    return repr(float(x)) if not float(x).is_integer() else str(int(x))


def serialize_matpower(case: CaseData) -> str:
    """Write ``case`` as MATPOWER text that :func:`parse_matpower` reads back."""
    out = [f"function mpc = {case.name or 'case'}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(case.base_mva)};", ""]
    out.append("%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin")
    out.append("mpc.bus = [")
    for b in case.buses:
        row = [b.id, _BUS_CODES[b.type], b.pd, b.qd, b.gs, b.bs, 1, 1, 0, b.base_kv, 1, b.vmax, b.vmin]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out.append("];\n")
    out.append("%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin")
    out.append("mpc.gen = [")
    for g in case.generators:
        row = [g.bus, g.pg, g.qg, g.qmax, g.qmin, 1, case.base_mva, g.status, g.pmax, g.pmin]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out.append("];\n")
    out.append("%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus")
    out.append("mpc.branch = [")
    for br in case.branches:
        row = [br.from_bus, br.to_bus, br.r, br.x, br.b, br.rate_a, 0, 0, br.tap, br.shift, br.status]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out.append("];\n")
    out.append("%\t2\tstartup\tshutdown\tn\tc2\tc1\tc0")
    out.append("mpc.gencost = [")
    by_gen = sorted(case.costs, key=lambda c: c.generator)
    for c in by_gen:
        out.append("\t" + "\t".join(_fmt(v) for v in [2, 0, 0, 3, c.c2, c.c1, c.c0]) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# canonical JSON


def case_to_json(case: CaseData, indent: int | None = 1) -> str:
    doc = {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [asdict(b) for b in case.buses],
        "branches": [asdict(b) for b in case.branches],
        "generators": [asdict(g) for g in case.generators],
        "costs": [asdict(c) for c in case.costs],
    }
    return json.dumps(doc, indent=indent)


def _records(cls, rows, what):
    names = {f.name for f in fields(cls)}
    out = []
    for i, row in enumerate(rows):
        extra = set(row) - names
        if extra:
            raise CaseParseError(f"{what}[{i}]: unknown field(s) {sorted(extra)}")
        try:
            out.append(cls(**row))
        except TypeError as exc:
            raise CaseParseError(f"{what}[{i}]: {exc}") from None
    return tuple(out)


def case_from_json(text: str) -> CaseData:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    for key in ("base_mva", "buses", "branches", "generators", "costs"):
        if key not in doc:
            raise CaseParseError(f"missing required field {key!r}")
    try:
        return CaseData(
            base_mva=float(doc["base_mva"]),
            buses=_records(BusRecord, doc["buses"], "buses"),
            branches=_records(BranchRecord, doc["branches"], "branches"),
            generators=_records(GenRecord, doc["generators"], "generators"),
            costs=_records(CostRecord, doc["costs"], "costs"),
            name=doc.get("name", ""),
        )
    except CaseValidationError as exc:
        raise CaseParseError(str(exc)) from None


def load_case(path) -> CaseData:
    """Load a ``.m`` or ``.json`` case file, or a bundled case by name."""
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED_CASES:
        return bundled_case(str(path))
    text = p.read_text()
    if p.suffix.lower() == ".json":
        return case_from_json(text)
    return parse_matpower(text, name=p.stem)


def bundled_case(name: str, fmt: str = "m") -> CaseData:
    if name not in BUNDLED_CASES:
        raise KeyError(f"unknown bundled case {name!r}; choose from {BUNDLED_CASES}")
    path = DATA_DIR / f"{name}.{fmt}"
    if fmt == "json":
        return case_from_json(path.read_text())
    return parse_matpower(path.read_text(), name=name)


# --------------------------------------------------------------------------
# per-unit network data


@dataclass(frozen=True, eq=False)
class NetworkData:
    """Per-unit view of a case with dense 0-based bus numbering.

    Out-of-service branches and generators are dropped.  Generator arrays
    keep case order (among in-service units); ``gen_index`` maps back to the
    position in ``CaseData.generators``.
    """

    name: str
    base_mva: float
    bus_ids: np.ndarray  # original ids, position = dense index
    bus_type: tuple[str, ...]
    slack: int
    pd: np.ndarray
    qd: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    base_kv: np.ndarray
    f_bus: np.ndarray
    t_bus: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b: np.ndarray
    rate_a: np.ndarray  # p.u.; 0 = unlimited
    tap: np.ndarray
    shift: np.ndarray  # radians
    gen_bus: np.ndarray
    gen_index: np.ndarray
    pg0: np.ndarray
    qg0: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray
    c2: np.ndarray  # $/h per p.u.^2
    c1: np.ndarray  # $/h per p.u.
    c0: np.ndarray  # $/h
    index_of: dict = field(default_factory=dict)

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_branch(self) -> int:
        return len(self.f_bus)

    @property
    def n_gen(self) -> int:
        return len(self.gen_bus)


def to_network(case: CaseData) -> NetworkData:
    base = case.base_mva
    index_of = {b.id: k for k, b in enumerate(case.buses)}
    n = len(case.buses)
    pd = np.zeros(n)
    qd = np.zeros(n)
    for b in case.buses:
        pd[index_of[b.id]] += b.pd / base
        qd[index_of[b.id]] += b.qd / base
    arr = lambda seq: np.array(list(seq), dtype=float)  # noqa: E731
    brs = [br for br in case.branches if br.status]
    cost_of = {c.generator: c for c in case.costs}
    gens = [(i, g) for i, g in enumerate(case.generators) if g.status]
    return NetworkData(
        name=case.name,
        base_mva=base,
        bus_ids=np.array([b.id for b in case.buses], dtype=int),
        bus_type=tuple(b.type for b in case.buses),
        slack=next(k for k, b in enumerate(case.buses) if b.type == "slack"),
        pd=pd,
        qd=qd,
        gs=arr(b.gs / base for b in case.buses),
        bs=arr(b.bs / base for b in case.buses),
        vmin=arr(b.vmin for b in case.buses),
        vmax=arr(b.vmax for b in case.buses),
        base_kv=arr(b.base_kv for b in case.buses),
        f_bus=np.array([index_of[br.from_bus] for br in brs], dtype=int),
        t_bus=np.array([index_of[br.to_bus] for br in brs], dtype=int),
        r=arr(br.r for br in brs),
        x=arr(br.x for br in brs),
        b=arr(br.b for br in brs),
        rate_a=arr(br.rate_a / base for br in brs),
        tap=arr(br.tap for br in brs),
        shift=arr(math.radians(br.shift) for br in brs),
        gen_bus=np.array([index_of[g.bus] for _, g in gens], dtype=int),
        gen_index=np.array([i for i, _ in gens], dtype=int),
        pg0=arr(g.pg / base for _, g in gens),
        qg0=arr(g.qg / base for _, g in gens),
        pmin=arr(g.pmin / base for _, g in gens),
        pmax=arr(g.pmax / base for _, g in gens),
        qmin=arr(g.qmin / base for _, g in gens),
        qmax=arr(g.qmax / base for _, g in gens),
        c2=arr(cost_of[i].c2 * base**2 for i, _ in gens),
        c1=arr(cost_of[i].c1 * base for i, _ in gens),
        c0=arr(cost_of[i].c0 for i, _ in gens),
        index_of=index_of,
    )


def from_network(net: NetworkData) -> CaseData:
    """Inverse of :func:`to_network` (for in-service elements)."""
    base = net.base_mva
    ids = [int(i) for i in net.bus_ids]
    buses = tuple(
        BusRecord(
            id=ids[k], type=net.bus_type[k], pd=net.pd[k] * base, qd=net.qd[k] * base,
            gs=net.gs[k] * base, bs=net.bs[k] * base, vmin=net.vmin[k], vmax=net.vmax[k],
            base_kv=net.base_kv[k],
        )
        for k in range(net.n_bus)
    )
    branches = tuple(
        BranchRecord(
            from_bus=ids[net.f_bus[j]], to_bus=ids[net.t_bus[j]], r=net.r[j], x=net.x[j],
            b=net.b[j], rate_a=net.rate_a[j] * base, tap=net.tap[j],
            shift=math.degrees(net.shift[j]),
        )
        for j in range(net.n_branch)
    )
    gens = tuple(
        GenRecord(
            bus=ids[net.gen_bus[i]], pg=net.pg0[i] * base, qg=net.qg0[i] * base,
            pmin=net.pmin[i] * base, pmax=net.pmax[i] * base,
            qmin=net.qmin[i] * base, qmax=net.qmax[i] * base,
        )
        for i in range(net.n_gen)
    )
    costs = tuple(
        CostRecord(generator=i, c2=net.c2[i] / base**2, c1=net.c1[i] / base, c0=net.c0[i])
        for i in range(net.n_gen)
    )
    return CaseData(base, buses, branches, gens, costs, name=net.name)
