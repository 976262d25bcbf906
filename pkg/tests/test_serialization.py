import struct

import numpy as np
import pytest

from dlperf.architectures import build_architecture
from dlperf.serialization import (
    MAGIC,
    WeightFileError,
    deserialize,
    from_bytes,
    serialize,
    serialized_size,
    to_bytes,
)


@pytest.fixture
def mini():
    return build_architecture("mini-alexnet", 6, seed=5)


@pytest.mark.parametrize("name", ["mini-alexnet", "mini-googlenet"])
def test_round_trip_is_byte_identical(tmp_path, name):
    net = build_architecture(name, 6, seed=5)
    path = tmp_path / "w.dlpb"
    n = serialize(net, path)
    assert n == path.stat().st_size == serialized_size(net)["total"]
    again = deserialize(path)
    assert to_bytes(again) == path.read_bytes()
    for lid, (w, b) in net.params.items():
        np.testing.assert_array_equal(again.params[lid][0], w.astype(np.float32))
        np.testing.assert_array_equal(again.params[lid][1], b.astype(np.float32))


def test_payload_is_four_bytes_per_parameter(mini):
    assert serialized_size(mini)["payload"] == 4 * mini.param_count()


def test_symbolic_size_needs_no_parameters():
    net = build_architecture("vgg-19", 1000)
    size = serialized_size(net)
    assert not net.params and size["payload"] == 4 * net.param_count()


def test_bad_magic(mini):
    data = bytearray(to_bytes(mini))
    data[:4] = b"XXXX"
    with pytest.raises(WeightFileError, match="magic"):
        from_bytes(bytes(data))


def test_bad_version(mini):
    data = bytearray(to_bytes(mini))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(WeightFileError, match="version"):
        from_bytes(bytes(data))


def test_truncated_payload(mini):
    data = to_bytes(mini)
    with pytest.raises(WeightFileError, match="truncated"):
        from_bytes(data[:-3])


def test_trailing_bytes(mini):
    with pytest.raises(WeightFileError, match="trailing"):
        from_bytes(to_bytes(mini) + b"\0")


def test_shape_disagreement(mini):
    data = bytearray(to_bytes(mini))
    tid = b"conv1/weights"
    pos = data.index(tid) + len(tid)
    # first dim of conv1/weights: 16 -> 15
    data[pos + 4 : pos + 8] = struct.pack("<I", 15)
    with pytest.raises(WeightFileError, match="conv1/weights"):
        from_bytes(bytes(data))


def test_unparameterized_net_cannot_serialize():
    with pytest.raises(WeightFileError):
        to_bytes(build_architecture("alexnet-2012", 1000))


def test_magic_constant():
    assert MAGIC == b"DLPB"
