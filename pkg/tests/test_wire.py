import numpy as np
import pytest
import scipy.sparse as sparse

from fedgraph.errors import DecodeError
from fedgraph.federation import GlobalFeedback, UploadMessage
from fedgraph.graph import StructuralGraph
from fedgraph.prototypes import Prototype, PrototypeSet
from fedgraph.wire import decode_message, encode_message


def random_upload(rng):
    n = int(rng.integers(4, 30))
    k = int(rng.integers(1, 4))
    d = int(rng.integers(1, 5))
    c = int(rng.integers(1, 4))
    rows = np.repeat(np.arange(n), k)
    cols = rng.integers(0, n, size=n * k)
    weights = rng.random(n * k)
    graph = StructuralGraph(
        weights=sparse.csr_matrix((weights, (rows, cols)), shape=(n, n)),
        row_capacity=k + 1,
    )
    protos = PrototypeSet(
        client_id=int(rng.integers(0, 5)),
        prototypes=[
            Prototype(
                mean=rng.normal(size=d),
                covariance=np.eye(d) * (1 + rng.random()),
                weight=float(rng.random()),
            )
            for _ in range(c)
        ],
        noised=bool(rng.integers(0, 2)),
        epsilon_spent=float(rng.random()),
        space="input" if rng.integers(0, 2) == 0 else "latent",
    )
    return UploadMessage(
        client_id=protos.client_id,
        graph=graph,
        local_labels=rng.integers(0, c, size=n).astype(np.int64),
        prototypes=protos,
        round_index=int(rng.integers(0, 7)),
    )


def messages_equal(a, b):
    if a.client_id != b.client_id or a.round_index != b.round_index:
        return False
    if not np.array_equal(a.graph.weights.toarray(), b.graph.weights.toarray()):
        return False
    if a.graph.row_capacity != b.graph.row_capacity:
        return False
    if not np.array_equal(a.local_labels, b.local_labels):
        return False
    pa, pb = a.prototypes, b.prototypes
    if (pa.noised, pa.space, pa.count) != (pb.noised, pb.space, pb.count):
        return False
    if pa.epsilon_spent != pb.epsilon_spent:
        return False
    for x, y in zip(pa.prototypes, pb.prototypes):
        if not (
            np.array_equal(x.mean, y.mean)
            and np.array_equal(x.covariance, y.covariance)
            and x.weight == y.weight
        ):
            return False
    return True


class TestRoundTrip:
    def test_thousand_random_messages(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            msg = random_upload(rng)
            back = decode_message(encode_message(msg))
            assert messages_equal(msg, back)

    def test_feedback_round_trip(self):
        rng = np.random.default_rng(1)
        protos = random_upload(rng).prototypes
        fb = GlobalFeedback(
            client_id=3,
            assignments=rng.integers(0, 4, size=17).astype(np.int64),
            global_prototypes=protos,
            round_index=2,
        )
        back = decode_message(encode_message(fb))
        assert back.client_id == 3 and back.round_index == 2
        assert np.array_equal(back.assignments, fb.assignments)
        assert back.global_prototypes.count == protos.count

    def test_encoding_deterministic(self):
        rng = np.random.default_rng(2)
        msg = random_upload(rng)
        assert encode_message(msg) == encode_message(msg)


class TestCorruption:
    def test_single_byte_mutations_never_decode_silently(self):
        rng = np.random.default_rng(3)
        msg = random_upload(rng)
        payload = bytearray(encode_message(msg))
        for _ in range(1000):
            pos = int(rng.integers(0, len(payload)))
            delta = int(rng.integers(1, 256))
            mutated = bytearray(payload)
            mutated[pos] = (mutated[pos] + delta) % 256
            with pytest.raises(DecodeError):
                decode_message(bytes(mutated))

    def test_truncation_reports_offset(self):
        rng = np.random.default_rng(4)
        payload = encode_message(random_upload(rng))
        with pytest.raises(DecodeError) as info:
            decode_message(payload[: len(payload) // 2])
        assert info.value.offset is not None

    def test_unknown_version_rejected(self):
        rng = np.random.default_rng(5)
        payload = bytearray(encode_message(random_upload(rng)))
        payload[4] = 0xFF
        with pytest.raises(DecodeError, match="version"):
            decode_message(bytes(payload))

    def test_bad_magic_rejected(self):
        rng = np.random.default_rng(6)
        payload = bytearray(encode_message(random_upload(rng)))
        payload[0] = ord("X")
        with pytest.raises(DecodeError, match="magic"):
            decode_message(bytes(payload))
