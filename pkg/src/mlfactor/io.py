"""Dataset ingestion and model persistence.

Model files are JSON with a schema tag and version. Floats are written with
their shortest round-trip representation, so write -> read -> write is
byte-identical.
"""
import csv
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .em import Dataset
from .mlr import PsdMlr
from .partition import HierarchicalPartition, PartitionError, RankAllocation, build_partition, check_ranks

SCHEMA = "mlfactor.model"
SCHEMA_VERSION = 1

_NUMBER = re.compile(r"^\s*[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?\s*$")


class InputError(ValueError):
    """Malformed input file; ``code`` is stable, ``where`` locates the problem."""

    def __init__(self, message, code="E_INPUT", **where):
        super().__init__(message)
        self.code = code
        self.where = where


@dataclass
class ModelFile:
    model: PsdMlr
    B: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        m = self.model
        part = m.partition
        meta = dict(self.metadata)
        if not np.array_equal(part.perm, np.arange(m.n)):
            meta["perm"] = part.perm.tolist()
        if part.labels is not None:
            meta["features"] = [str(x) for x in part.contiguous_labels()]
        doc = {
            "schema": SCHEMA,
            "version": SCHEMA_VERSION,
            "n": m.n,
            "levels": part.level_sizes(),
            "ranks": list(m.ranks.ranks),
            "Fbar": m.Fbar.tolist(),
            "d": m.d.tolist(),
            "B": None if self.B is None else np.asarray(self.B).tolist(),
            "metadata": meta,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text) -> "ModelFile":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"model file is not valid JSON: {exc}", "E_MODEL_FILE", line=exc.lineno) from exc
        if doc.get("schema") != SCHEMA:
            raise InputError("not a model file (schema tag missing)", "E_MODEL_FILE")
        if doc.get("version") != SCHEMA_VERSION:
            raise InputError(f"unsupported model schema version {doc.get('version')!r}", "E_MODEL_VERSION")
        meta = doc.get("metadata") or {}
        n = int(doc["n"])
        perm = meta.get("perm")
        labels = None
        if "features" in meta:
            # stored in contiguous order; recover raw order through perm
            order = np.arange(n) if perm is None else np.asarray(perm)
            raw = [None] * n
            for pos, lab in zip(order, meta["features"]):
                raw[int(pos)] = lab
            labels = raw
        part = HierarchicalPartition.from_sizes(doc["levels"], perm=perm, labels=labels)
        ranks = RankAllocation(doc["ranks"])
        Fbar = np.asarray(doc["Fbar"], dtype=np.float64).reshape(n, -1)
        off = ranks.col_offsets()
        factors = [Fbar[:, off[l]:off[l + 1]] for l in range(part.L - 1)]
        model = PsdMlr(part, ranks, factors, doc["d"])
        B = None if doc.get("B") is None else np.asarray(doc["B"], dtype=np.float64).reshape(n, -1)
        return cls(model, B, meta)


def write_model(path, model: PsdMlr, B=None, metadata=None):
    text = ModelFile(model, B, dict(metadata or {})).to_json()
    with open(path, "w") as fh:
        fh.write(text)


def read_model(path) -> ModelFile:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}", "E_IO", path=str(path)) from exc
    return ModelFile.from_json(text)


def read_csv_matrix(path):
    """Header row of labels plus numeric rows; returns ``(labels, N x n array)``."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}", "E_IO", path=str(path)) from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file", "E_INPUT", path=str(path)) from None
        header = [h.strip() for h in header]
        seen = {}
        for j, h in enumerate(header):
            if h in seen:
                raise InputError(
                    f"{path}: duplicated label {h!r} in columns {seen[h]} and {j}",
                    "E_DUPLICATE_LABEL", row=0, column=j,
                )
            seen[h] = j
        rows = []
        for i, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise InputError(
                    f"{path}: row {i} has {len(rec)} cells, header has {len(header)}",
                    "E_RAGGED", row=i,
                )
            vals = []
            for j, c in enumerate(rec):
                if not _NUMBER.match(c):
                    raise InputError(
                        f"{path}: non-numeric cell {c!r} at row {i}, column {j}",
                        "E_NON_NUMERIC", row=i, column=j,
                    )
                vals.append(float(c))
            rows.append(vals)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return header, X


def write_csv_matrix(path, labels, X):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(labels)
        for row in np.asarray(X):
            w.writerow([repr(float(v)) for v in row])


def read_hierarchy(path, columns=None):
    """Parse a hierarchy JSON.

    Returns ``(partition, ranks)``; ``partition.perm`` maps contiguous
    positions to indices into ``columns`` (the CSV header) when given, and
    ``partition.labels`` holds those raw labels.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}", "E_IO", path=str(path)) from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}", "E_HIERARCHY", line=exc.lineno) from exc
    return hierarchy_from_dict(doc, columns)


def _locate(features, columns):
    index = {c: j for j, c in enumerate(columns)}
    pos = []
    for k, f in enumerate(features):
        if f not in index:
            raise InputError(f"hierarchy feature {f!r} (entry {k}) is not a data column",
                             "E_UNKNOWN_LABEL", entry=k)
        pos.append(index[f])
    if len(set(features)) != len(features):
        dup = next(f for f in features if features.count(f) > 1)
        raise InputError(f"hierarchy lists feature {dup!r} twice", "E_DUPLICATE_LABEL")
    extra = [c for c in columns if c not in set(features)]
    if extra:
        raise InputError(f"data column {extra[0]!r} is not in the hierarchy", "E_UNKNOWN_LABEL",
                         column=index[extra[0]])
    return np.array(pos, dtype=np.int64)


def hierarchy_from_dict(doc, columns=None):
    features = doc.get("features")
    if features is not None:
        features = [str(f) for f in features]
    try:
        if "assignments" in doc:
            assign = doc["assignments"]
            labels = features if features is not None else (list(columns) if columns is not None else None)
            part = build_partition(assign, labels=labels)
            perm = part.perm
            if columns is not None and labels is not None:
                perm = _locate(labels, columns)[perm]
            labs = list(columns) if columns is not None else labels
            part = HierarchicalPartition(part.bounds, perm=perm, labels=labs)
        elif "levels" in doc:
            part = HierarchicalPartition.from_sizes(doc["levels"])
            perm, labs = None, None
            if features is not None and columns is not None:
                perm, labs = _locate(features, columns), list(columns)
            elif features is not None:
                labs = features
            elif columns is not None:
                labs = list(columns)
            part = HierarchicalPartition(part.bounds, perm=perm, labels=labs)
        else:
            raise InputError("hierarchy needs 'levels' or 'assignments'", "E_HIERARCHY")
        if "n" in doc and int(doc["n"]) != part.n:
            raise InputError(f"hierarchy n={doc['n']} but groups cover {part.n} features", "E_HIERARCHY")
        if "ranks" not in doc:
            raise InputError("hierarchy needs 'ranks'", "E_HIERARCHY")
        ranks = check_ranks(part, RankAllocation(doc["ranks"], levels=part.L))
    except PartitionError as exc:
        raise InputError(str(exc), "E_PARTITION") from exc
    if columns is not None and len(columns) != part.n:
        raise InputError(f"data has {len(columns)} columns, hierarchy has {part.n} features", "E_SHAPE")
    return part, ranks


def read_dataset(path, hierarchy_path, covariates_path=None):
    """Load ``(Dataset, partition, ranks)`` with features in contiguous order."""
    columns, Y = read_csv_matrix(path)
    if Y.shape[0] < 1:
        raise InputError(f"{path}: N must be >= 1 (no data rows)", "E_EMPTY")
    part, ranks = read_hierarchy(hierarchy_path, columns)
    X = None
    if covariates_path is not None:
        _, X = read_csv_matrix(covariates_path)
        if X.shape[0] != Y.shape[0]:
            raise InputError(f"covariates have {X.shape[0]} rows, data has {Y.shape[0]}", "E_SHAPE")
    return Dataset(Y[:, part.perm], X), part, ranks


def align_columns(columns, Y, model: PsdMlr):
    """Reorder raw CSV columns into the model's contiguous order."""
    part = model.partition
    if part.labels is not None and set(part.labels) == set(columns) and len(columns) == model.n:
        pos = _locate(part.contiguous_labels(), list(columns))
        return Y[:, pos]
    if Y.shape[1] != model.n:
        raise InputError(f"data has {Y.shape[1]} columns, model has n={model.n}", "E_SHAPE")
    return Y[:, part.perm]


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loglik", "rel_change", "seconds"])
        for i, ll, rc, t in trace.rows():
            w.writerow([i, repr(ll), repr(rc), f"{t:.6f}"])
