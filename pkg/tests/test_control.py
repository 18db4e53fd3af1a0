import pytest
from hypothesis import given
from hypothesis import strategies as st

from pqbench.errors import MalformedControl
from pqbench.model import Mode
from pqbench.tls.control import (MAX_LINE_BYTES, Done, Err, Go, Hello, Ready, Result, Retry, Suite, decode_control,
                                 encode_control, make_test_id, split_test_id)

ids = st.from_regex(r"[A-Za-z0-9][A-Za-z0-9_.+-]{0,20}", fullmatch=True)
test_ids = st.builds(make_test_id, ids, ids, st.sampled_from(list(Mode)))
text = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\r\n"), max_size=80)

messages = st.one_of(
    st.builds(Hello, st.integers(0, 10**6), ids),
    st.builds(Ready, st.sampled_from(list(Suite)), test_ids),
    st.builds(Go, test_ids),
    st.builds(Result, test_ids, text),
    st.builds(Retry, test_ids, st.integers(1, 1000)),
    st.builds(Done, st.sampled_from(list(Suite))),
    st.builds(Err, ids, text),
)


@given(messages)
def test_round_trip(msg):
    line = encode_control(msg)
    assert "\n" not in line
    assert decode_control(line) == msg
    assert decode_control((line + "\n").encode()) == msg


@given(test_ids)
def test_test_id_split(tid):
    sig, kem, mode = split_test_id(tid)
    assert make_test_id(sig, kem, mode) == tid


def test_wire_examples():
    tid = "ML-DSA-44|ML-KEM-512|first"
    assert encode_control(Hello(1, "laptop")) == "HELLO 1 laptop"
    assert encode_control(Ready(Suite.HANDSHAKE, tid)) == f"READY HANDSHAKE {tid}"
    assert encode_control(Retry(tid, 2)) == f"RETRY {tid} 2"
    assert encode_control(Result(tid, "812 30.000000 676.67 0")) == f"RESULT {tid} 812 30.000000 676.67 0"
    assert decode_control(f"ERR TOO_MANY_RETRIES {tid}") == Err("TOO_MANY_RETRIES", tid)
    assert decode_control("DONE SPEED\r\n") == Done(Suite.SPEED)


@pytest.mark.parametrize("line", [
    "",
    "HELLO",
    "HELLO one laptop",
    "HELLO 1 laptop extra",
    "HELLO 1  laptop",
    "READY FOO ML-DSA-44|ML-KEM-512|first",
    "READY HANDSHAKE ML-DSA-44|ML-KEM-512",
    "READY HANDSHAKE ML-DSA-44|ML-KEM-512|sometimes",
    "GO",
    "RETRY ML-DSA-44|ML-KEM-512|first 0",
    "RETRY ML-DSA-44|ML-KEM-512|first -1",
    "RESULT",
    "DONE",
    "ERR",
    "WAVE hello",
    "go ML-DSA-44|ML-KEM-512|first",
])
def test_malformed_lines(line):
    with pytest.raises(MalformedControl):
        decode_control(line)


def test_line_length_limit():
    tid = "A|B|first"
    payload = "x" * (MAX_LINE_BYTES - len(f"RESULT {tid} "))
    assert decode_control(f"RESULT {tid} {payload}").payload == payload
    with pytest.raises(MalformedControl):
        decode_control(f"RESULT {tid} {payload}x")
    with pytest.raises(MalformedControl):
        decode_control(f"RESULT {tid} {payload}x".encode())
    with pytest.raises(MalformedControl):
        decode_control(b"GO \xff\xfe")


def test_constructors_validate():
    with pytest.raises(MalformedControl):
        Hello(1, "two words")
    with pytest.raises(MalformedControl):
        Retry("A|B|first", 0)
    with pytest.raises(MalformedControl):
        Result("A|B|first", "multi\nline")
    with pytest.raises(MalformedControl):
        Go("not a test id")
