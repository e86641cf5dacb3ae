"""Canonical binary wire format for federation messages.

Layout (all integers little-endian, all floats IEEE-754 binary64):

    magic     4 bytes  b"SPFG"
    version   u16      currently 1
    kind      u8       1 = upload message, 2 = global feedback
    length    u64      byte length of the body
    crc32     u32      zlib CRC-32 of the body
    body      ...      kind-specific, field order below

Upload body:
    client_id u32, round_index u32, schema fixed by (version, kind)
    graph:      n u32, row_capacity u32, nnz u64,
                indptr (n+1) u64, indices nnz u32, weights nnz f64
    labels:     n i32 (per-sample local cluster labels)
    prototypes: count u16, dim u16, noised u8, space u8 (0 input/1 latent),
                epsilon f64, then per prototype: weight f64, mean dim f64,
                covariance dim*dim f64 (row major)

Feedback body:
    client_id u32, round_index u32,
    assignments: n u32, labels n i32,
    prototypes: same prototype block as above

Every header field is validated and the CRC covers the whole body, so any
single-byte corruption is detected rather than silently decoded.
"""

import struct
import zlib

import numpy as np
import scipy.sparse as sparse

from .errors import DecodeError
from .graph import StructuralGraph
from .prototypes import Prototype, PrototypeSet

MAGIC = b"SPFG"
VERSION = 1
KIND_UPLOAD = 1
KIND_FEEDBACK = 2

_HEADER = struct.Struct("<4sHBQI")


class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u16(self, v):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def f64(self, v):
        self.parts.append(struct.pack("<d", float(v)))

    def array(self, arr, dtype):
        self.parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    def getvalue(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data, base_offset):
        self.data = data
        self.pos = 0
        self.base = base_offset

    def _take(self, nbytes, what):
        if self.pos + nbytes > len(self.data):
            raise DecodeError(
                f"truncated payload while reading {what}", offset=self.base + self.pos
            )
        chunk = self.data[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return chunk

    def u8(self, what="u8"):
        return struct.unpack("<B", self._take(1, what))[0]

    def u16(self, what="u16"):
        return struct.unpack("<H", self._take(2, what))[0]

    def u32(self, what="u32"):
        return struct.unpack("<I", self._take(4, what))[0]

    def u64(self, what="u64"):
        return struct.unpack("<Q", self._take(8, what))[0]

    def f64(self, what="f64"):
        return struct.unpack("<d", self._take(8, what))[0]

    def array(self, count, dtype, what):
        dtype = np.dtype(dtype)
        raw = self._take(count * dtype.itemsize, what)
        return np.frombuffer(raw, dtype=dtype).copy()

    def done(self):
        if self.pos != len(self.data):
            raise DecodeError(
                f"{len(self.data) - self.pos} trailing bytes after message body",
                offset=self.base + self.pos,
            )


def _write_graph(w, graph):
    csr = graph.weights.tocsr()
    csr.sort_indices()
    w.u32(graph.n)
    w.u32(graph.row_capacity)
    w.u64(csr.nnz)
    w.array(csr.indptr, "<u8")
    w.array(csr.indices, "<u4")
    w.array(csr.data, "<f8")


def _read_graph(r):
    n = r.u32("graph n")
    capacity = r.u32("graph row_capacity")
    nnz = r.u64("graph nnz")
    indptr = r.array(n + 1, "<u8", "graph indptr")
    if indptr[0] != 0 or indptr[-1] != nnz or np.any(np.diff(indptr.astype(np.int64)) < 0):
        raise DecodeError("graph indptr is not monotone", offset=r.base + r.pos)
    indices = r.array(nnz, "<u4", "graph indices")
    if nnz and indices.max() >= n:
        raise DecodeError("graph column index out of range", offset=r.base + r.pos)
    weights = r.array(nnz, "<f8", "graph weights")
    csr = sparse.csr_matrix(
        (weights, indices.astype(np.int64), indptr.astype(np.int64)), shape=(n, n)
    )
    return StructuralGraph(weights=csr, row_capacity=int(capacity))


def _write_prototypes(w, protos):
    w.u16(protos.count)
    w.u16(protos.dim)
    w.u8(1 if protos.noised else 0)
    w.u8(0 if protos.space == "input" else 1)
    w.f64(protos.epsilon_spent)
    for p in protos.prototypes:
        w.f64(p.weight)
        w.array(p.mean, "<f8")
        w.array(p.covariance, "<f8")


def _read_prototypes(r, client_id):
    count = r.u16("prototype count")
    dim = r.u16("prototype dim")
    noised = r.u8("noised flag")
    if noised > 1:
        raise DecodeError(f"invalid noised flag {noised}", offset=r.base + r.pos - 1)
    space = r.u8("space flag")
    if space > 1:
        raise DecodeError(f"invalid space flag {space}", offset=r.base + r.pos - 1)
    epsilon = r.f64("epsilon")
    protos = []
    for _ in range(count):
        weight = r.f64("prototype weight")
        mean = r.array(dim, "<f8", "prototype mean")
        cov = r.array(dim * dim, "<f8", "prototype covariance").reshape(dim, dim)
        protos.append(Prototype(mean=mean, covariance=cov, weight=weight))
    return PrototypeSet(
        client_id=client_id,
        prototypes=protos,
        noised=bool(noised),
        epsilon_spent=epsilon,
        space="input" if space == 0 else "latent",
    )


def encode_message(msg):
    """Serialize an UploadMessage or GlobalFeedback to canonical bytes."""
    from .federation import GlobalFeedback, UploadMessage  # circular at import time

    w = _Writer()
    if isinstance(msg, UploadMessage):
        kind = KIND_UPLOAD
        w.u32(msg.client_id)
        w.u32(msg.round_index)
        _write_graph(w, msg.graph)
        w.array(msg.local_labels, "<i4")
        _write_prototypes(w, msg.prototypes)
    elif isinstance(msg, GlobalFeedback):
        kind = KIND_FEEDBACK
        w.u32(msg.client_id)
        w.u32(msg.round_index)
        labels = np.asarray(msg.assignments, dtype="<i4")
        w.u32(len(labels))
        w.array(labels, "<i4")
        _write_prototypes(w, msg.global_prototypes)
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    body = w.getvalue()
    header = _HEADER.pack(MAGIC, VERSION, kind, len(body), zlib.crc32(body))
    return header + body


def decode_message(payload):
    """Decode canonical bytes back into a message structure.

    Raises DecodeError (with a byte offset) on any corruption: bad magic,
    unknown version or kind, length mismatch, CRC mismatch, truncation, or
    malformed fields.
    """
    from .federation import GlobalFeedback, UploadMessage

    if len(payload) < _HEADER.size:
        raise DecodeError("payload shorter than header", offset=len(payload))
    magic, version, kind, length, crc = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise DecodeError(f"unsupported schema version {version}", offset=4)
    if kind not in (KIND_UPLOAD, KIND_FEEDBACK):
        raise DecodeError(f"unknown message kind {kind}", offset=6)
    body = payload[_HEADER.size :]
    if len(body) != length:
        raise DecodeError(
            f"body length {len(body)} does not match header {length}", offset=7
        )
    if zlib.crc32(body) != crc:
        raise DecodeError("CRC mismatch: payload corrupted", offset=15)

    r = _Reader(body, _HEADER.size)
    client_id = r.u32("client_id")
    round_index = r.u32("round_index")
    if kind == KIND_UPLOAD:
        graph = _read_graph(r)
        local_labels = r.array(graph.n, "<i4", "local labels")
        protos = _read_prototypes(r, client_id)
        r.done()
        return UploadMessage(
            client_id=client_id,
            graph=graph,
            local_labels=local_labels.astype(np.int64),
            prototypes=protos,
            round_index=round_index,
        )
    n = r.u32("assignment count")
    labels = r.array(n, "<i4", "assignments")
    protos = _read_prototypes(r, client_id)
    r.done()
    return GlobalFeedback(
        client_id=client_id,
        assignments=labels.astype(np.int64),
        global_prototypes=protos,
        round_index=round_index,
    )
