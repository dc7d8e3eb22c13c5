"""Preference-pair manifests, the embedding store and batch ordering.

Embedding file layout (little-endian):

    "ADJE" | version u32 | d u32 | count u64
    then per record: seq_id u64 | L u32 | prompt_len u32 | L*d float32 row-major
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from errors import DataError, FormatError
from models import PreferencePair, TokenSequence

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"ADJE"
EMBEDDING_VERSION = 1
HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("d", "<u4"), ("count", "<u8")])
RECORD = np.dtype([("seq_id", "<u8"), ("L", "<u4"), ("prompt_len", "<u4")])
REQUIRED_FIELDS = ("id", "domain", "chosen", "rejected")


##############################################################################
# Embedding store


class EmbeddingStore:
    """Immutable map seq_id -> (float32 L x d matrix, prompt_len)."""

    def __init__(self, d, records=None):
        self.d = int(d)
        self._records = {}
        for seq_id, (matrix, prompt_len) in (records or {}).items():
            self._records[int(seq_id)] = self._validated(seq_id, matrix, prompt_len)

    def _validated(self, seq_id, matrix, prompt_len):
        matrix = np.ascontiguousarray(matrix, dtype="<f4")
        if matrix.ndim != 2 or matrix.shape[1] != self.d:
            raise DataError(f"sequence {seq_id}: expected L x {self.d}, got {matrix.shape}")
        if not 1 <= prompt_len < matrix.shape[0]:
            raise DataError(f"sequence {seq_id}: prompt_len {prompt_len} leaves no response "
                            f"(L={matrix.shape[0]})")
        matrix.setflags(write=False)
        return matrix, int(prompt_len)

    def __len__(self):
        return len(self._records)

    def __contains__(self, seq_id):
        return int(seq_id) in self._records

    def __repr__(self):
        return f"<EmbeddingStore d={self.d} sequences={len(self)}>"

    def ids(self):
        return list(self._records)

    def raw(self, seq_id):
        """The stored float32 matrix and prompt length."""

        try:
            return self._records[int(seq_id)]
        except KeyError:
            raise DataError(f"unknown sequence id {seq_id}") from None

    def get(self, seq_id):
        matrix, prompt_len = self.raw(seq_id)
        return TokenSequence.from_prompt_len(matrix.astype(np.float64), prompt_len)


def write_embeddings(path, store):
    """Write `store` in record-id order."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.array([(EMBEDDING_MAGIC, EMBEDDING_VERSION, store.d, len(store))], dtype=HEADER)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        for seq_id in sorted(store.ids()):
            matrix, prompt_len = store.raw(seq_id)
            f.write(np.array([(seq_id, matrix.shape[0], prompt_len)], dtype=RECORD).tobytes())
            f.write(matrix.tobytes())
    logger.info("wrote %d sequences (d=%d) to %s", len(store), store.d, path)


def load_embeddings(path, d=None):
    """Read an embedding file into an EmbeddingStore.

    `d`, when given, must match the file's width.
    """

    buf = Path(path).read_bytes()
    if len(buf) < HEADER.itemsize:
        raise FormatError("truncated header", offset=len(buf))
    header = np.frombuffer(buf, dtype=HEADER, count=1)[0]
    if header["magic"] != EMBEDDING_MAGIC:
        raise FormatError(f"bad magic {header['magic']!r}", offset=0)
    if header["version"] != EMBEDDING_VERSION:
        raise FormatError(f"unsupported version {int(header['version'])}", offset=4)
    width = int(header["d"])
    if d is not None and width != d:
        raise FormatError(f"file has d={width} but d={d} was expected", offset=8)

    store = EmbeddingStore(width)
    offset = HEADER.itemsize
    for _ in range(int(header["count"])):
        if offset + RECORD.itemsize > len(buf):
            raise FormatError("truncated record header", offset=offset)
        rec = np.frombuffer(buf, dtype=RECORD, count=1, offset=offset)[0]
        seq_id, L, prompt_len = int(rec["seq_id"]), int(rec["L"]), int(rec["prompt_len"])
        start = offset + RECORD.itemsize
        end = start + 4 * L * width
        if end > len(buf):
            raise FormatError(f"truncated payload of sequence {seq_id}", offset=offset)
        if seq_id in store:
            raise FormatError(f"duplicate sequence id {seq_id}", offset=offset)
        matrix = np.frombuffer(buf, dtype="<f4", count=L * width, offset=start).reshape(L, width)
        try:
            store._records[seq_id] = store._validated(seq_id, matrix, prompt_len)
        except DataError as exc:
            raise FormatError(str(exc), offset=offset) from None
        offset = end
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes", offset=offset)
    logger.info("loaded %d sequences (d=%d) from %s", len(store), width, path)
    return store


##############################################################################
# Pair manifests


def _whole(row, key, default=None):
    value = row.get(key)
    if value is None and default is not None:
        return default
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not float(value).is_integer():
        raise DataError(f"{key} must be an integer, got {value!r}")
    return int(value)


def load_pairs(manifest_path, store=None):
    """Read a JSON-lines manifest of preference pairs.

    With a store, every chosen/rejected reference must exist in it.
    """

    pairs = []
    seen = set()
    with open(manifest_path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON ({exc.msg})", line=line_no) from None
            if not isinstance(row, dict):
                raise DataError("expected a JSON object", line=line_no)
            missing = [key for key in REQUIRED_FIELDS if key not in row]
            if missing:
                raise DataError(f"missing field(s) {', '.join(missing)}", line=line_no)
            if row["id"] in seen:
                raise DataError(f"duplicate id {row['id']!r}", line=line_no)
            try:
                pair = PreferencePair(id=str(row["id"]), domain=str(row["domain"]),
                                      chosen=_whole(row, "chosen"), rejected=_whole(row, "rejected"),
                                      magnitude=_whole(row, "magnitude", default=0))
            except (TypeError, ValueError) as exc:
                raise DataError(str(exc), line=line_no) from None
            except DataError as exc:
                raise DataError(str(exc), line=line_no) from None
            if store is not None:
                for ref in (pair.chosen, pair.rejected):
                    if ref not in store:
                        raise DataError(f"dangling sequence reference {ref}", line=line_no)
            seen.add(pair.id)
            pairs.append(pair)
    logger.info("loaded %d pairs from %s", len(pairs), manifest_path)
    return pairs


def write_pairs(path, pairs):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for pair in pairs:
            row = {"id": pair.id, "domain": pair.domain, "chosen": pair.chosen,
                   "rejected": pair.rejected}
            if pair.magnitude:
                row["magnitude"] = pair.magnitude
            f.write(json.dumps(row) + "\n")


##############################################################################
# Datasets and batching


@dataclass
class PreferenceDataset:
    """Pairs plus the store their references resolve against."""

    pairs: list
    store: EmbeddingStore

    def __len__(self):
        return len(self.pairs)

    def domains(self):
        return sorted({pair.domain for pair in self.pairs})

    def sequences(self, pairs, side):
        return [self.store.get(getattr(pair, side)) for pair in pairs]


def load_dataset(embeddings_path, manifest_path, d=None):
    store = load_embeddings(embeddings_path, d=d)
    return PreferenceDataset(pairs=load_pairs(manifest_path, store), store=store)


def batch_iter(pairs, batch_pairs, seed, epoch):
    """Seeded permutation of `pairs` cut into batches; the last may be short."""

    if batch_pairs < 1:
        raise DataError(f"batch_pairs must be >= 1, got {batch_pairs}")
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    return [[pairs[i] for i in order[start:start + batch_pairs]]
            for start in range(0, len(pairs), batch_pairs)]


def split_pairs(pairs, n_test):
    """Hold out the last `n_test` pairs of every domain."""

    by_domain = {}
    for pair in pairs:
        by_domain.setdefault(pair.domain, []).append(pair)
    held = set()
    for group in by_domain.values():
        held.update(p.id for p in group[len(group) - n_test:] if n_test > 0)
    return ([p for p in pairs if p.id not in held], [p for p in pairs if p.id in held])
