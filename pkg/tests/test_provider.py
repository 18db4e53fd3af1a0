import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pqbench.errors import NonzeroExit, SpawnFailed, WrongFamily
from pqbench.model import Operation, builtin_registry
from pqbench.provider import (MockCostProfile, OutputKind, default_cycle_counter, external_adapter, mock_kem,
                              mock_providers, mock_sig, render_command)

REG = builtin_registry()
FREE = MockCostProfile.free()


def test_same_seed_same_outputs():
    a, b = mock_kem(REG["ML-KEM-512"], 9, FREE), mock_kem(REG["ML-KEM-512"], 9, FREE)
    (pk, sk), again = a.keygen(), b.keygen()
    assert (pk, sk) == again
    assert a.encaps(pk) == b.encaps(pk)
    assert mock_kem(REG["ML-KEM-512"], 10, FREE).keygen() != mock_kem(REG["ML-KEM-512"], 9, FREE).keygen()


@settings(max_examples=60)
@given(st.sampled_from([d.id for d in REG if d.family.value == "KEM"]), st.integers(0, 2**64 - 1))
def test_kem_sizes_and_agreement(alg, seed):
    d = REG[alg]
    kem = mock_kem(d, seed, FREE)
    pk, sk = kem.keygen()
    ct, ss = kem.encaps(pk)
    assert (len(pk), len(sk), len(ct), len(ss)) == (d.public_key_bytes, d.private_key_bytes, d.payload_bytes, 32)
    assert kem.decaps(sk, ct) == ss
    bad = bytes([ct[0] ^ 1]) + ct[1:] if len(ct) > 32 else ct[:-1] + bytes([ct[-1] ^ 1])
    assert kem.decaps(sk, bad) != ss  # implicit rejection: a different, deterministic secret
    assert kem.decaps(sk, bad) == kem.decaps(sk, bad)


@settings(max_examples=60)
@given(st.sampled_from([d.id for d in REG if d.family.value == "SIGNATURE"]), st.binary(max_size=300))
def test_signatures_bind_key_and_message(alg, msg):
    sig = mock_sig(REG[alg], 1, FREE)
    pk, sk = sig.keypair()
    s = sig.sign(sk, msg)
    assert len(s) == REG[alg].payload_bytes and sig.verify(pk, msg, s)
    assert not sig.verify(pk, msg + b"x", s)
    other_pk, _ = sig.keypair()
    assert not sig.verify(other_pk, msg, s)
    assert not sig.verify(pk, msg, s[:-1])


def test_wrong_family_and_length_checks():
    with pytest.raises(WrongFamily):
        mock_kem(REG["ML-DSA-44"], 1)
    kem = mock_kem(REG["ML-KEM-512"], 1, FREE)
    with pytest.raises(ValueError):
        kem.encaps(b"short")


def test_cost_profile_scales_with_size():
    small = MockCostProfile.for_descriptor(REG["ML-KEM-512"])
    big = MockCostProfile.for_descriptor(REG["ML-KEM-1024"])
    assert 0 < small.units(Operation.ENCAPS) < big.units(Operation.ENCAPS)
    assert small.units(Operation.SIGN) == 0
    assert MockCostProfile.for_descriptor(REG["ML-KEM-512"], scale=2).units(Operation.KEYGEN) == \
        2 * small.units(Operation.KEYGEN)
    with pytest.raises(ValueError):
        MockCostProfile({Operation.SIGN: -1})
    provs = mock_providers(REG.subset(["ML-KEM-512", "ML-DSA-44"]), seed=42)
    assert set(provs) == {"ML-KEM-512", "ML-DSA-44"}


def test_cycle_counter_is_monotonic():
    c = default_cycle_counter()
    a = c.read()
    b = c.read()
    assert b >= a


def test_render_command_keeps_values_as_single_arguments():
    argv = render_command("speed_kem {alg} --seconds {window}", alg="Falcon 512; rm -rf /", window=3)
    assert argv == ["speed_kem", "Falcon 512; rm -rf /", "--seconds", "3"]


def test_external_adapter_success_and_errors():
    py = sys.executable
    cap = external_adapter(f"{py} -c \"import sys; print(sys.argv[1])\" {{alg}}", OutputKind.LIBOQS_SPEED,
                           alg="ML-KEM-512")
    assert cap.text.strip() == "ML-KEM-512" and cap.status == 0
    with pytest.raises(NonzeroExit) as info:
        external_adapter(f"{py} -c \"import sys; sys.stderr.write('boom'); sys.exit(3)\"", "S_TIME")
    assert info.value.exit_code == 2 and "boom" in str(info.value.context.get("stderr", "")) + str(info.value)
    with pytest.raises(SpawnFailed):
        external_adapter("/nonexistent/tool {alg}", "MASSIF", alg="x")
    with pytest.raises(SpawnFailed):
        external_adapter(f"{py} -c \"import time; time.sleep(5)\"", "MASSIF", timeout=0.2)
    with pytest.raises(SpawnFailed):
        external_adapter("", "MASSIF")
