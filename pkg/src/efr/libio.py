"""Reading benchmark library files and serializing instances/reports.

TSPLIB-style ``.tsp``/``.atsp``/``.vrp`` files are parsed into
:class:`~efr.instances.ProblemInstance` containers with coordinates
normalized into the unit square.  The normalization is a pure joint
rescaling: both axes are shifted by the coordinate minimum and divided by the
larger extent, so shapes are preserved and ``meta.scale`` recovers original
units (``raw_length = length * scale``).

Distances are kept REAL-VALUED.  Benchmark files define integer-rounded
metrics (``nint``/``ceil``/ATT); the file's convention is recorded in
:class:`LibraryMeta` and :func:`library_route_length` reapplies it, which is
how published integer optima are reproduced exactly.

For ATT the extra ``1/sqrt(10)`` factor is folded into the stored
coordinates, keeping the ``dist == euclid(coords)`` invariant; the recorded
scale is still the joint extent, so ``length * scale`` yields the unrounded
pseudo-Euclidean length.

The ``efr-inst-1`` JSON container and JSON-lines report writer live here as
well.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError, ParseError
from .instances import (ProblemInstance, ProblemKind, SolveReport,
                        pairwise_euclid)

INSTANCE_FORMAT_VERSION = "efr-inst-1"

_HEADER_KEYWORDS = {
    "NAME", "TYPE", "COMMENT", "DIMENSION", "CAPACITY", "EDGE_WEIGHT_TYPE",
    "EDGE_WEIGHT_FORMAT", "EDGE_DATA_FORMAT", "NODE_COORD_TYPE",
    "DISPLAY_DATA_TYPE",
}
_SECTION_KEYWORDS = {
    "NODE_COORD_SECTION", "EDGE_WEIGHT_SECTION", "DEMAND_SECTION",
    "DEPOT_SECTION", "DISPLAY_DATA_SECTION", "TOUR_SECTION",
}
_SUPPORTED_EDGE_WEIGHT_TYPES = {"EUC_2D", "CEIL_2D", "ATT", "EXPLICIT"}
_SUPPORTED_MATRIX_FORMATS = {
    "FULL_MATRIX", "UPPER_ROW", "LOWER_ROW", "UPPER_DIAG_ROW", "LOWER_DIAG_ROW",
}


@dataclass
class LibraryMeta:
    """Provenance of a parsed library file, enough to undo normalization."""

    name: str
    kind: ProblemKind
    dimension: int
    edge_weight_type: str
    edge_weight_format: Optional[str] = None
    comment: str = ""
    capacity: Optional[int] = None
    scale: float = 1.0
    offset: Tuple[float, float] = (0.0, 0.0)
    rounding: str = "none"  # 'nint' | 'ceil' | 'att' | 'none'
    source_path: Optional[str] = None
    extras: dict = field(default_factory=dict)


def _tokenize(text: str):
    """Yield (line_number, line) with comments kept — TSPLIB has none inline."""
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line:
            yield i, line


class _Lines:
    """Peekable cursor over non-empty (line_number, text) pairs."""

    def __init__(self, text: str):
        self._items = list(_tokenize(text))
        self._pos = 0
        self.last_lineno = 0

    def __iter__(self):
        return self

    def __next__(self):
        if self._pos >= len(self._items):
            raise StopIteration
        item = self._items[self._pos]
        self._pos += 1
        self.last_lineno = item[0]
        return item

    def peek(self):
        if self._pos >= len(self._items):
            return None
        return self._items[self._pos]

    def take_section_tokens(self) -> List[str]:
        """Consume lines up to (not including) the next header/section line."""
        tokens: List[str] = []
        while True:
            nxt = self.peek()
            if nxt is None or _split_header(nxt[1]) is not None:
                return tokens
            _, line = next(self)
            tokens.extend(line.split())


def _split_header(line: str) -> Optional[Tuple[str, str]]:
    if ":" in line:
        key, _, value = line.partition(":")
        return key.strip().upper(), value.strip()
    word = line.strip().upper()
    if word in _SECTION_KEYWORDS or word == "EOF":
        return word, ""
    return None


def _to_floats(tokens: Sequence[str], lineno: int) -> List[float]:
    out = []
    for tok in tokens:
        try:
            out.append(float(tok))
        except ValueError:
            raise ParseError(f"line {lineno}: expected a number, got {tok!r}") from None
    return out


def parse_library_text(text: str, source_path: Optional[str] = None
                       ) -> Tuple[ProblemInstance, LibraryMeta]:
    """Parse a TSPLIB/CVRPLIB problem file given as text.

    Raises :class:`ParseError` (with a line number) on unknown keywords,
    truncated sections, or missing required fields.
    """
    headers: dict = {}
    coords: dict = {}
    demands: dict = {}
    depots: List[int] = []
    matrix_numbers: Optional[List[float]] = None

    lines = _Lines(text)
    for lineno, line in lines:
        parsed = _split_header(line)
        if parsed is None:
            raise ParseError(f"line {lineno}: unknown keyword {line.split()[0]!r}")
        key, value = parsed
        if key == "EOF":
            break
        if key in _HEADER_KEYWORDS:
            headers[key] = value
            continue
        if key not in _SECTION_KEYWORDS:
            raise ParseError(f"line {lineno}: unknown keyword {key!r}")

        dimension = headers.get("DIMENSION")
        if dimension is None:
            raise ParseError(f"line {lineno}: {key} before DIMENSION")
        try:
            dimension = int(dimension)
        except ValueError:
            raise ParseError(f"line {lineno}: DIMENSION is not an integer") from None

        if key == "NODE_COORD_SECTION" or key == "DISPLAY_DATA_SECTION":
            target = coords if key == "NODE_COORD_SECTION" else {}
            nums = _to_floats(lines.take_section_tokens(), lines.last_lineno)
            if len(nums) % 3 != 0:
                raise ParseError(f"line {lines.last_lineno}: {key} entries must be "
                                 "'id x y' triples")
            for base in range(0, len(nums), 3):
                target[int(nums[base])] = (nums[base + 1], nums[base + 2])
            if key == "NODE_COORD_SECTION":
                missing = [i for i in range(1, dimension + 1) if i not in target]
                if missing:
                    raise ParseError(
                        f"line {lines.last_lineno}: NODE_COORD_SECTION is missing "
                        f"node {missing[0]}")
        elif key == "DEMAND_SECTION":
            nums = _to_floats(lines.take_section_tokens(), lines.last_lineno)
            if len(nums) % 2 != 0:
                raise ParseError(f"line {lines.last_lineno}: DEMAND_SECTION entries "
                                 "must be 'id demand' pairs")
            for base in range(0, len(nums), 2):
                demands[int(nums[base])] = int(nums[base + 1])
            missing = [i for i in range(1, dimension + 1) if i not in demands]
            if missing:
                raise ParseError(
                    f"line {lines.last_lineno}: DEMAND_SECTION is missing "
                    f"node {missing[0]}")
        elif key == "DEPOT_SECTION":
            toks = lines.take_section_tokens()
            if "-1" not in toks:
                raise ParseError(f"line {lines.last_lineno}: DEPOT_SECTION not "
                                 "terminated by -1")
            depots.extend(int(float(t)) for t in toks[:toks.index("-1")])
        elif key == "EDGE_WEIGHT_SECTION":
            fmt = headers.get("EDGE_WEIGHT_FORMAT", "FULL_MATRIX").upper()
            if fmt not in _SUPPORTED_MATRIX_FORMATS:
                raise ParseError(f"line {lineno}: unsupported EDGE_WEIGHT_FORMAT {fmt!r}")
            n = dimension
            count = {
                "FULL_MATRIX": n * n,
                "UPPER_ROW": n * (n - 1) // 2,
                "LOWER_ROW": n * (n - 1) // 2,
                "UPPER_DIAG_ROW": n * (n + 1) // 2,
                "LOWER_DIAG_ROW": n * (n + 1) // 2,
            }[fmt]
            matrix_numbers = _to_floats(lines.take_section_tokens(), lines.last_lineno)
            if len(matrix_numbers) != count:
                raise ParseError(
                    f"line {lines.last_lineno}: EDGE_WEIGHT_SECTION has "
                    f"{len(matrix_numbers)} numbers, {fmt} with DIMENSION "
                    f"{n} needs {count}")
        elif key == "TOUR_SECTION":
            raise ParseError(f"line {lineno}: TOUR_SECTION belongs in a tour file, "
                             "use parse_tour_text")

    # ---- assemble -------------------------------------------------------
    if "TYPE" not in headers:
        raise ParseError("missing TYPE header")
    type_word = headers["TYPE"].split()[0].upper() if headers["TYPE"] else ""
    kind_map = {"TSP": ProblemKind.TSP, "ATSP": ProblemKind.ATSP,
                "CVRP": ProblemKind.CVRP, "VRP": ProblemKind.CVRP}
    if type_word not in kind_map:
        raise ParseError(f"unsupported TYPE {headers['TYPE']!r}")
    kind = kind_map[type_word]
    if "DIMENSION" not in headers:
        raise ParseError("missing DIMENSION header")
    n = int(headers["DIMENSION"])
    if n < 2:
        raise ParseError(f"DIMENSION must be at least 2, got {n}")
    name = headers.get("NAME", "") or (Path(source_path).stem if source_path else "unnamed")
    ewt = headers.get("EDGE_WEIGHT_TYPE", "").upper()
    if ewt not in _SUPPORTED_EDGE_WEIGHT_TYPES:
        raise ParseError(f"unsupported EDGE_WEIGHT_TYPE {ewt!r}")

    meta = LibraryMeta(name=name, kind=kind, dimension=n, edge_weight_type=ewt,
                       edge_weight_format=headers.get("EDGE_WEIGHT_FORMAT"),
                       comment=headers.get("COMMENT", ""),
                       source_path=source_path)

    if ewt == "EXPLICIT":
        if matrix_numbers is None:
            raise ParseError("EDGE_WEIGHT_TYPE EXPLICIT without EDGE_WEIGHT_SECTION")
        dist = _assemble_matrix(matrix_numbers, n,
                                (headers.get("EDGE_WEIGHT_FORMAT") or "FULL_MATRIX").upper())
        if kind is not ProblemKind.ATSP:
            if not np.allclose(dist, dist.T):
                raise ParseError("EXPLICIT matrix is asymmetric but TYPE is not ATSP")
            dist = np.triu(dist, 1) + np.triu(dist, 1).T  # make symmetry bit-exact
        np.fill_diagonal(dist, 0.0)
        meta.rounding = "none"
        meta.scale = 1.0
        node_coords = None
    else:
        if len(coords) != n:
            raise ParseError("coordinate-based EDGE_WEIGHT_TYPE without a complete "
                             "NODE_COORD_SECTION")
        raw = np.array([coords[i] for i in range(1, n + 1)], dtype=np.float64)
        mins = raw.min(axis=0)
        span = float((raw.max(axis=0) - mins).max())
        if span <= 0.0:
            span = 1.0
        node_coords = (raw - mins) / span
        meta.offset = (float(mins[0]), float(mins[1]))
        meta.scale = span
        meta.rounding = {"EUC_2D": "nint", "CEIL_2D": "ceil", "ATT": "att"}[ewt]
        if ewt == "ATT":
            node_coords = node_coords / math.sqrt(10.0)
        dist = pairwise_euclid(node_coords)

    capacity = None
    demand_arr = None
    if kind is ProblemKind.CVRP:
        if "CAPACITY" not in headers:
            raise ParseError("CVRP file is missing the CAPACITY header")
        capacity = int(headers["CAPACITY"])
        if len(demands) != n:
            raise ParseError("CVRP file is missing a complete DEMAND_SECTION")
        if not depots:
            raise ParseError("CVRP file is missing DEPOT_SECTION")
        if len(depots) != 1:
            raise ParseError(f"exactly one depot is supported, found {len(depots)}")
        depot = depots[0]
        if not 1 <= depot <= n:
            raise ParseError(f"depot id {depot} out of range")
        if demands[depot] != 0:
            raise ParseError(f"depot node {depot} has non-zero demand {demands[depot]}")
        # reorder so the depot sits at index 0, other nodes keep relative order
        order = [depot] + [i for i in range(1, n + 1) if i != depot]
        demand_arr = np.array([demands[i] for i in order], dtype=np.int64)
        if node_coords is not None:
            index = [i - 1 for i in order]
            node_coords = node_coords[index]
            dist = dist[np.ix_(index, index)]
        meta.capacity = capacity
        meta.extras["depot_file_id"] = depot

    instance = ProblemInstance(kind=kind, n=n, dist=dist, coords=node_coords,
                               demands=demand_arr, capacity=capacity,
                               name=name,
                               meta={"source": "library", "file": source_path,
                                     "scale": meta.scale, "rounding": meta.rounding})
    return instance, meta


def _assemble_matrix(numbers: Sequence[float], n: int, fmt: str) -> np.ndarray:
    m = np.zeros((n, n), dtype=np.float64)
    it = iter(numbers)
    if fmt == "FULL_MATRIX":
        m[:] = np.array(numbers, dtype=np.float64).reshape(n, n)
    elif fmt in ("UPPER_ROW", "UPPER_DIAG_ROW"):
        start_off = 0 if fmt == "UPPER_DIAG_ROW" else 1
        for i in range(n):
            for j in range(i + start_off, n):
                m[i, j] = next(it)
        m = m + np.triu(m, 1).T
    else:  # LOWER_ROW / LOWER_DIAG_ROW
        end_off = 1 if fmt == "LOWER_DIAG_ROW" else 0
        for i in range(n):
            for j in range(0, i + end_off):
                m[i, j] = next(it)
        m = m + np.tril(m, -1).T
    return m


def parse_tour_text(text: str) -> List[int]:
    """Parse a TSPLIB tour file; returns 0-based node indices."""
    tour: List[int] = []
    in_section = False
    for lineno, line in _tokenize(text):
        parsed = _split_header(line)
        if parsed is not None:
            key, _ = parsed
            if key == "TOUR_SECTION":
                in_section = True
                continue
            if key == "EOF":
                break
            if key in _HEADER_KEYWORDS or key == "TYPE":
                continue
            raise ParseError(f"line {lineno}: unknown keyword {key!r}")
        if not in_section:
            raise ParseError(f"line {lineno}: unexpected data before TOUR_SECTION")
        done = False
        for tok in line.split():
            v = int(float(tok))
            if v == -1:
                done = True
                break
            tour.append(v - 1)
        if done:
            break
    if not tour:
        raise ParseError("tour file contains no TOUR_SECTION entries")
    return tour


def parse_cvrp_solution_text(text: str) -> Tuple[List[List[int]], Optional[float]]:
    """Parse a CVRPLIB ``.sol`` file: ``Route #k: c1 c2 ...`` lines plus an
    optional ``Cost`` line.  Customer numbers map directly to instance indices
    (depot is 0)."""
    routes: List[List[int]] = []
    cost: Optional[float] = None
    for lineno, line in _tokenize(text):
        low = line.lower()
        if low.startswith("route"):
            _, _, rest = line.partition(":")
            try:
                routes.append([int(tok) for tok in rest.split()])
            except ValueError:
                raise ParseError(f"line {lineno}: route entries must be integers") from None
        elif low.startswith("cost"):
            toks = line.replace(":", " ").split()
            cost = float(toks[-1])
        else:
            raise ParseError(f"line {lineno}: unknown keyword {line.split()[0]!r}")
    if not routes:
        raise ParseError("solution file contains no routes")
    return routes, cost


def load_library_file(path) -> Tuple[ProblemInstance, LibraryMeta]:
    path = Path(path)
    return parse_library_text(path.read_text(), source_path=str(path))


def library_route_length(instance: ProblemInstance, meta: LibraryMeta, route) -> int:
    """Route length under the file's native integer rounding convention.

    Each arc's distance is converted back to original units and rounded the
    way the library defines (``nint`` rounds half away from zero, ``ceil``
    rounds up, ATT rounds to the nearest integer not below the value).
    Reproduces published optima exactly for coordinate-based files.
    """
    route = np.asarray(route, dtype=np.int64)
    if instance.kind is ProblemKind.CVRP:
        arcs = list(zip(route[:-1], route[1:]))
    else:
        arcs = list(zip(route, np.roll(route, -1)))
    total = 0
    for a, b in arcs:
        raw = instance.dist[a, b] * meta.scale
        if meta.rounding == "nint":
            total += int(math.floor(raw + 0.5))
        elif meta.rounding == "ceil":
            total += int(math.ceil(raw))
        elif meta.rounding == "att":
            t = int(math.floor(raw + 0.5))
            total += t + 1 if t < raw else t
        else:
            total += raw
    return total


# ---------------------------------------------------------------------------
# instance container (efr-inst-1)
# ---------------------------------------------------------------------------

def instance_to_dict(instance: ProblemInstance) -> dict:
    return {
        "version": INSTANCE_FORMAT_VERSION,
        "kind": instance.kind.value,
        "n": instance.n,
        "name": instance.name,
        "seed": instance.seed,
        "dist": instance.dist.tolist(),
        "coords": None if instance.coords is None else instance.coords.tolist(),
        "demands": None if instance.demands is None else instance.demands.tolist(),
        "capacity": instance.capacity,
        "meta": instance.meta,
    }


def instance_from_dict(data: dict) -> ProblemInstance:
    version = data.get("version")
    if version != INSTANCE_FORMAT_VERSION:
        raise DataError(f"unsupported instance container version {version!r}; "
                        f"expected {INSTANCE_FORMAT_VERSION!r}")
    try:
        return ProblemInstance(
            kind=ProblemKind(data["kind"]),
            n=int(data["n"]),
            dist=np.array(data["dist"], dtype=np.float64),
            coords=None if data.get("coords") is None else np.array(data["coords"]),
            demands=None if data.get("demands") is None else np.array(data["demands"]),
            capacity=data.get("capacity"),
            seed=data.get("seed"),
            name=data.get("name", ""),
            meta=data.get("meta", {}),
        )
    except KeyError as exc:
        raise DataError(f"instance container missing field {exc}") from None


def save_instances(instances: Sequence[ProblemInstance], path) -> None:
    """Write instances as JSON lines (one efr-inst-1 object per line)."""
    path = Path(path)
    with path.open("w") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_dict(inst)) + "\n")


def load_instances(path) -> List[ProblemInstance]:
    path = Path(path)
    out = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            out.append(instance_from_dict(data))
    return out


def save_instance(instance: ProblemInstance, path) -> None:
    Path(path).write_text(json.dumps(instance_to_dict(instance), indent=2) + "\n")


def load_instance(path) -> ProblemInstance:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg})") from None
    return instance_from_dict(data)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def write_report(reports: Union[SolveReport, Sequence[SolveReport]], path,
                 append: bool = False, extra_records: Sequence[dict] = ()) -> None:
    """Append solver reports to a JSON-lines file (one record per line)."""
    if isinstance(reports, SolveReport):
        reports = [reports]
    path = Path(path)
    mode = "a" if append else "w"
    with path.open(mode) as fh:
        for rec in extra_records:
            fh.write(json.dumps(rec) + "\n")
        for rep in reports:
            fh.write(json.dumps(rep.to_record()) + "\n")


def read_report(path) -> List[dict]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
