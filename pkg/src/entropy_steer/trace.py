"""Per-step generation records and their JSONL/CSV codecs."""
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields

__all__ = ["StepRecord", "Trace", "CSV_COLUMNS", "export", "dumps", "loads", "read_trace"]


@dataclass
class StepRecord:
    step: int
    token: int
    entropy: float
    ema: float
    alpha: int
    loss: float = None
    grad_norm: float = None
    optimized: bool = False
    skipped: bool = False
    optimizer_steps: int = 0
    degenerate_slots: int = 0


CSV_COLUMNS = tuple(f.name for f in fields(StepRecord))
_INT_COLUMNS = {"step", "token", "alpha", "optimizer_steps", "degenerate_slots"}
_BOOL_COLUMNS = {"optimized", "skipped"}


@dataclass
class Trace:
    header: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def tokens(self):
        return [r.token for r in self.records]

    @property
    def entropies(self):
        return [r.entropy for r in self.records]

    @property
    def emas(self):
        return [r.ema for r in self.records]

    @property
    def alphas(self):
        return [r.alpha for r in self.records]

    @property
    def optimizer_steps(self):
        return self.records[-1].optimizer_steps if self.records else 0

    def same_records(self, other):
        return self.records == other.records


def _json_default(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if hasattr(obj, "item"):
        return obj.item()
    if hasattr(obj, "tolist"):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _rows(obj):
    """(header dict, list of row dicts) for a Trace or any record-like object."""
    if isinstance(obj, Trace):
        return obj.header, [asdict(r) for r in obj.records]
    if hasattr(obj, "to_dict"):
        return {}, [obj.to_dict()]
    if isinstance(obj, dict):
        return {}, [obj]
    raise TypeError(f"cannot export {type(obj).__name__}")


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, dict)):
        return json.dumps(value)
    return str(value)


def dumps(obj, fmt="jsonl"):
    """Serialize a trace (or a summary-like record) to text.

    JSONL: a ``{"kind": "header", ...}`` line, then one ``{"kind": "step", ...}``
    line per record. CSV: ``#``-prefixed JSON header comment line, then a
    fixed column row (``CSV_COLUMNS`` for traces) and one row per record.
    Floats are written with ``repr`` so they round-trip exactly.
    """
    header, rows = _rows(obj)
    if fmt == "jsonl":
        lines = [json.dumps({"kind": "header", **header}, default=_json_default, sort_keys=True)]
        lines += [json.dumps({"kind": "step", **row}, default=_json_default) for row in rows]
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        buf.write("# " + json.dumps(header, default=_json_default, sort_keys=True) + "\n")
        columns = list(CSV_COLUMNS) if isinstance(obj, Trace) else list(rows[0].keys())
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_csv_cell(row[c]) for c in columns])
        return buf.getvalue()
    raise ValueError(f"unknown export format {fmt!r}; expected 'jsonl' or 'csv'")


def export(obj, path, fmt="jsonl"):
    text = dumps(obj, fmt)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def _parse_csv_value(column, text):
    if text == "":
        return None
    if column in _BOOL_COLUMNS:
        return text == "1"
    if column in _INT_COLUMNS:
        return int(text)
    return float(text)


def loads(text, fmt="jsonl"):
    """Inverse of :func:`dumps` for traces."""
    if fmt == "jsonl":
        header, records = {}, []
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("kind", "step")
            if kind == "header":
                header = obj
            else:
                records.append(StepRecord(**obj))
        return Trace(header=header, records=records)
    if fmt == "csv":
        lines = text.splitlines()
        header = {}
        if lines and lines[0].startswith("# "):
            header = json.loads(lines[0][2:])
            lines = lines[1:]
        reader = csv.DictReader(lines)
        records = [StepRecord(**{c: _parse_csv_value(c, row[c]) for c in CSV_COLUMNS}) for row in reader]
        return Trace(header=header, records=records)
    raise ValueError(f"unknown export format {fmt!r}; expected 'jsonl' or 'csv'")


def read_trace(path):
    fmt = "csv" if str(path).endswith(".csv") else "jsonl"
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), fmt)


def is_finite(value):
    return value is None or isinstance(value, (bool, int)) or math.isfinite(value)
