import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from pqf_bench import engine, stats  # noqa: F401  (registers resource types)
from pqf_bench.fields import canonical_dumps
from pqf_bench.linalg import NotUnitaryError, ShapeError, Unitary
from pqf_bench.manager import RecordSet
from pqf_bench.models import ResourceModel
from pqf_bench.samplers import ClickBatch

logger = logging.getLogger(__name__)

CLICK_FORMAT = "pqf-clicks"
CLICK_VERSION = 1
PathLike = Union[str, "os.PathLike[str]"]


class ClickFileError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CorruptRecordError(ClickFileError):
    pass


class MissingUnitaryError(ClickFileError):
    pass


@dataclass
class ClickData:
    """A parsed click file: header, one batch per unitary in header order, resolved unitaries."""

    header: Dict
    batches: List[ClickBatch]
    unitaries: Dict[str, Unitary] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.header["n"]

    @property
    def m(self) -> int:
        return self.header["m"]

    @property
    def records(self) -> RecordSet:
        return RecordSet(self.batches)


def schema_path(name: str) -> str:
    return os.path.join(os.path.dirname(__file__), "resources", "schemas", f"{name}.schema.json")


def load_schema(name: str) -> Dict:
    """JSON Schema of a file format: ``clicks-header``, ``report`` or ``route``."""
    with open(schema_path(name)) as f:
        return json.load(f)


def write_unitary(unitary: Unitary, path: PathLike) -> None:
    # Full float repr so that the content hash survives the round trip.
    with open(path, "w") as f:
        json.dump(unitary.to_json(), f, sort_keys=True)
        f.write("\n")


def read_unitary(path: PathLike) -> Unitary:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as error:
            raise ShapeError(f"{path}: not a unitary record ({error})") from error
    return Unitary.from_json(data)


def unitary_directory(path: PathLike) -> str:
    return f"{os.fspath(path)}.unitaries"


def _unitary_filename(unitary_id: str) -> str:
    return unitary_id.replace(":", "-") + ".json"


def write_clicks(
    path: PathLike,
    batches: Sequence[ClickBatch],
    unitaries: Optional[Mapping[str, Unitary]] = None,
    device: Optional[Dict] = None,
    plan: Optional[Dict] = None,
    inline: bool = False,
) -> None:
    """Header line, then ``<unitary index> <bitstring>[ counts=...]`` per record."""
    if not batches:
        raise ClickFileError("Nothing to write")
    n, m = batches[0].n, batches[0].m
    unitaries = unitaries or {}
    entries = []
    for batch in batches:
        if (batch.n, batch.m) != (n, m):
            raise ClickFileError(f"Batch {batch.unitary_id} does not match (n, m) = ({n}, {m})")
        entry = {"id": batch.unitary_id}
        unitary = unitaries.get(batch.unitary_id)
        if unitary is not None and inline:
            entry["inline"] = unitary.to_json()
        elif unitary is not None:
            directory = unitary_directory(path)
            os.makedirs(directory, exist_ok=True)
            filename = _unitary_filename(batch.unitary_id)
            write_unitary(unitary, os.path.join(directory, filename))
            entry["path"] = os.path.join(os.path.basename(directory), filename)
        entries.append(entry)
    header = {
        "format": CLICK_FORMAT,
        "version": CLICK_VERSION,
        "n": n,
        "m": m,
        "unitaries": entries,
        "device": device or {},
    }
    if plan is not None:
        header["plan"] = plan
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for index, batch in enumerate(batches):
            for row in batch.patterns:
                bits = "".join("1" if value else "0" for value in row.tolist())
                if row.max(initial=0) > 1:
                    counts = ",".join(str(value) for value in row.tolist())
                    f.write(f"{index} {bits} counts={counts}\n")
                else:
                    f.write(f"{index} {bits}\n")
    logger.info("wrote %d records to %s", sum(len(batch) for batch in batches), path)


def _parse_header(line: str) -> Dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as error:
        raise ClickFileError(f"header is not JSON ({error.msg})", 1) from error
    if not isinstance(header, dict) or header.get("format") != CLICK_FORMAT:
        raise ClickFileError(f'header must declare format "{CLICK_FORMAT}"', 1)
    if header.get("version") != CLICK_VERSION:
        raise ClickFileError(f"unsupported version {header.get('version')}", 1)
    for key in ("n", "m"):
        if not isinstance(header.get(key), int) or header[key] < 0:
            raise ClickFileError(f'header "{key}" must be a non-negative integer', 1)
    if not isinstance(header.get("unitaries"), list) or not header["unitaries"]:
        raise ClickFileError("header lists no unitaries", 1)
    return header


def _resolve_unitaries(header: Dict, path: PathLike) -> Dict[str, Unitary]:
    resolved = {}
    base = os.path.dirname(os.fspath(path))
    for entry in header["unitaries"]:
        unitary_id = entry.get("id")
        try:
            if "inline" in entry:
                unitary = Unitary.from_json(entry["inline"])
            elif "path" in entry:
                unitary = read_unitary(os.path.join(base, entry["path"]))
            else:
                continue
        except OSError as error:
            raise MissingUnitaryError(f"cannot read unitary {unitary_id}: {error}", 1) from error
        except (ShapeError, NotUnitaryError) as error:
            raise CorruptRecordError(f"unitary {unitary_id}: {error}", 1) from error
        if unitary.m != header["m"]:
            raise CorruptRecordError(f"unitary {unitary_id} has m={unitary.m}", 1)
        if unitary.content_hash != unitary_id:
            raise MissingUnitaryError(f"unitary content does not match {unitary_id}", 1)
        resolved[unitary_id] = unitary
    return resolved


def _parse_record(line: str, number: int, header: Dict) -> (int, np.ndarray):
    n, m = header["n"], header["m"]
    parts = line.split()
    if len(parts) not in (2, 3):
        raise CorruptRecordError(f"expected '<unitary> <bitstring>', got {line!r}", number)
    index, bits = parts[0], parts[1]
    if not index.isdigit():
        raise CorruptRecordError(f"unitary reference {index!r} is not an index", number)
    if int(index) >= len(header["unitaries"]):
        raise MissingUnitaryError(f"unknown unitary reference {index}", number)
    if len(bits) != m:
        raise CorruptRecordError(f"bitstring has length {len(bits)}, expected {m}", number)
    if set(bits) - {"0", "1"}:
        raise CorruptRecordError(f"bitstring {bits!r} is not binary", number)
    row = np.frombuffer(bits.encode(), dtype=np.uint8).astype(np.int64) - ord("0")
    if len(parts) == 3:
        if header.get("collision_free"):
            raise CorruptRecordError("count vector in a file declared collision-free", number)
        key, _, values = parts[2].partition("=")
        try:
            counts = np.array([int(value) for value in values.split(",")], dtype=np.int64)
        except ValueError:
            counts = None
        if key != "counts" or counts is None or counts.shape != (m,) or counts.min() < 0:
            raise CorruptRecordError(f"malformed count vector {parts[2]!r}", number)
        if not np.array_equal(counts > 0, row > 0):
            raise CorruptRecordError("count vector disagrees with bitstring", number)
        row = counts
    if row.sum() > n:
        raise CorruptRecordError(f"{row.sum()} clicks exceed n = {n}", number)
    return int(index), row


def ingest_clicks(path: PathLike, load_unitaries: bool = True) -> ClickData:
    """Single pass over a click file; every malformed line is reported with its number."""
    with open(path) as f:
        first = f.readline()
        if not first.strip():
            raise ClickFileError("empty file", 1)
        header = _parse_header(first)
        rows: List[List[np.ndarray]] = [[] for _ in header["unitaries"]]
        for number, line in enumerate(f, start=2):
            if not line.strip():
                continue
            index, row = _parse_record(line, number, header)
            rows[index].append(row)
    unitaries = _resolve_unitaries(header, path) if load_unitaries else {}
    m = header["m"]
    batches = [
        ClickBatch(
            entry["id"],
            header["n"],
            np.array(records, dtype=np.int64).reshape(len(records), m),
        )
        for entry, records in zip(header["unitaries"], rows)
    ]
    logger.info(
        "ingested %d records over %d unitaries from %s",
        sum(len(batch) for batch in batches),
        len(batches),
        path,
    )
    return ClickData(header, batches, unitaries)


def export_results(report: ResourceModel, path: PathLike, meta: Optional[Dict] = None) -> None:
    with open(path, "w") as f:
        f.write(canonical_dumps(report.to_document(meta)))


def import_results(path: PathLike) -> ResourceModel:
    with open(path) as f:
        return ResourceModel.from_document(json.load(f))
