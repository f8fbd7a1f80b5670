import json

import numpy as np
import pytest

from cicd_adapter.wire import (
    PROTOCOL_VERSION,
    WireError,
    decode_frame,
    encode_frame,
    logits_payload,
    vocab_digest,
)


def test_frame_round_trip():
    line = encode_frame("feed", "a", token=5)
    assert line.endswith(b"\n") and line.count(b"\n") == 1
    obj = decode_frame(line)
    assert obj["type"] == "feed" and obj["token"] == 5 and obj["v"] == PROTOCOL_VERSION


def test_decode_rejects_bad_json():
    with pytest.raises(WireError) as info:
        decode_frame(b"not json\n")
    assert info.value.code == "parse"


def test_decode_rejects_wrong_version():
    bad = json.dumps({"v": "cicd/9", "type": "hello"}).encode()
    with pytest.raises(WireError) as info:
        decode_frame(bad)
    assert info.value.code == "version"


def test_decode_rejects_unknown_type():
    bad = json.dumps({"v": PROTOCOL_VERSION, "type": "wat"}).encode()
    with pytest.raises(WireError):
        decode_frame(bad)


def test_logits_payload_dense_and_b64():
    values = np.array([1.5, -2.0, 0.25])
    dense = logits_payload(values)
    assert dense["logits"] == [1.5, -2.0, 0.25]
    packed = logits_payload(values, use_b64=True)
    import base64
    back = np.frombuffer(base64.b64decode(packed["logits_f32_b64"]), dtype="<f4")
    np.testing.assert_array_equal(back.astype(np.float64), values)


def test_logits_payload_rejects_nonfinite():
    with pytest.raises(WireError):
        logits_payload([float("nan")])


def test_vocab_digest_stable_and_sensitive():
    table = ["a", "b", "c"]
    assert vocab_digest(table) == vocab_digest(list(table))
    assert vocab_digest(table) != vocab_digest(["a", "bc"])
    # NUL separation prevents boundary collisions
    assert vocab_digest(["ab", "c"]) != vocab_digest(["a", "bc"])
