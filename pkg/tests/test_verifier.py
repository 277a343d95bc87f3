from __future__ import annotations

import pytest

from hyperion.ebpf import (
    ExecutionContext, InvalidInstruction, OutOfBoundsAccess, TooLarge, UnboundedLoop, UninitializedRegister,
    UnknownHelper, VerifiedProgram, VerifierLimits, assemble, execute, verify,
)
from hyperion.programs import SOURCES, bundled


def test_minimal_program_is_accepted_with_bound_two():
    vp = verify(assemble("mov r0, 0\nexit"))
    assert vp.max_instructions_executed == 2
    assert vp.accessed_helper_ids == frozenset()


def test_self_loop_is_unbounded():
    with pytest.raises(UnboundedLoop):
        verify(assemble("mov r0, 0\nself:\nja self\nexit"))


def test_reading_never_set_register_is_rejected():
    with pytest.raises(UninitializedRegister):
        verify(assemble("mov r0, r3\nexit"))


def test_exit_without_r0_is_rejected():
    with pytest.raises(UninitializedRegister):
        verify(assemble("exit"))


def test_counted_loop_is_accepted_with_exact_bound():
    vp = verify(assemble("mov r0, 0\nmov r1, 10\ntop:\nadd r0, r1\nsub r1, 1\njne r1, 0, top\nexit"))
    # 2 setup + 10 trips of 3 + exit
    assert vp.max_instructions_executed == 33


def test_loop_on_unknown_value_is_unbounded():
    with pytest.raises(UnboundedLoop):
        verify(assemble("ldxdw r1, [r2+0]\nmov r0, 0\ntop:\nadd r1, 1\njne r1, 0, top\nexit"))


@pytest.mark.parametrize("source,error", [
    ("mov r0, 0\nldxb r0, [r1+0]\nexit", OutOfBoundsAccess),            # no length check
    ("mov r0, 0\nstxdw [r10-520], r0\nexit", OutOfBoundsAccess),       # below the stack
    ("mov r0, 0\nstxdw [r10+0], r0\nexit", OutOfBoundsAccess),         # above the stack
    ("mov r0, 0\nldxdw r0, [r2+4089]\nexit", OutOfBoundsAccess),       # past the window
    ("mov r0, 0\nldxb r0, [r0+0]\nexit", OutOfBoundsAccess),            # scalar dereference
    ("call 999\nexit", UnknownHelper),
    ("mov r10, 0\nmov r0, 0\nexit", InvalidInstruction),
    ("mov r0, 0", InvalidInstruction),
    ("mov r0, 0\nja +5\nexit", InvalidInstruction),
])
def test_rejections(source, error):
    with pytest.raises(error):
        verify(assemble(source))


def test_unwritten_stack_reads_as_zero():
    vp = verify(assemble("mov r0, 1\nldxdw r0, [r10-8]\nexit"))
    assert execute(vp, ExecutionContext()).return_value == 0


def test_size_limit():
    body = "mov r0, 0\n" * 10 + "exit"
    with pytest.raises(TooLarge):
        verify(assemble(body), VerifierLimits(max_insns=5))


def test_unrolled_limit():
    src = "mov r0, 0\nmov r1, 100\ntop:\nsub r1, 1\njne r1, 0, top\nexit"
    with pytest.raises((TooLarge, UnboundedLoop)):
        verify(assemble(src), VerifierLimits(max_unrolled=50))


def test_length_checked_packet_read_is_accepted():
    vp = verify(assemble("""
        mov r6, r1
        call packet_len
        mov r7, r0
        mov r0, 0
        jlt r7, 4, out
        ldxw r0, [r6+0]
    out:
        exit
    """))
    assert vp.accessed_helper_ids == {3}
    assert "packet" in set().union(*vp.mem_regions.values())


def test_stack_usage_is_reported():
    vp = verify(assemble("mov r0, 0\nstxdw [r10-64], r0\nexit"))
    assert vp.stack_usage == 64


def test_verified_program_cannot_be_forged():
    prog = assemble("mov r0, 0\nexit")
    with pytest.raises(TypeError):
        VerifiedProgram(prog, 2, frozenset(), 0, {})


@pytest.mark.parametrize("name", sorted(SOURCES))
def test_bundled_programs_verify(name):
    vp = verify(bundled(name))
    assert 0 < vp.max_instructions_executed <= 65536
