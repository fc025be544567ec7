import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL, make_device
from pvssd.errors import ParseError, UnknownFile, UnknownPolicy
from pvssd.host import HostShim, LbaAllocator, parse_spm
from pvssd.nand import NandGeometry
from pvssd.policy import PolicyOp
from pvssd.simtime import DAY, YEAR

PS = SMALL.page_size_bytes


def test_parse_spm_examples():
    req = parse_spm("PolicyCreate {FileRule=*.pdf} {RT=1year} {BC=1day}")
    assert (req.op, req.rule, req.rt, req.bc) == (PolicyOp.CREATE, "*.pdf", YEAR, DAY)
    assert parse_spm("$ PolicyDelete {Id=7}").policy_id == 7
    assert parse_spm("PolicyChange {Id=2} {BC=6h}").bc == 6 * 3600 * 10**6


@pytest.mark.parametrize("text", [
    "PolicyCreate {FileRule=*.pdf} {RT=soon}",
    "PolicyCreate {FileRule=*.pdf}",
    "PolicyCreate {RT=1d}",
    "PolicyDelete {Id=x}",
    "PolicyDelete {Id=1} {RT=1d}",
    "PolicyCreate {FileRule=a} {RT=1d} {RT=2d}",
    "PolicyCreate {FileRule=a} {RT=1d} junk",
    "PolicyErase {Id=1}",
])
def test_parse_spm_rejects(text):
    with pytest.raises(ParseError):
        parse_spm(text)


def test_pm_match_examples(shim):
    shim.spm_submit("PolicyCreate {FileRule=*.pdf} {RT=1year} {BC=1day}")
    shim.spm_submit("PolicyCreate {FileRule=/safe/*} {RT=1d}")
    assert shim.pm.pm_match("report.pdf") == (1, 1)
    assert shim.pm.pm_match("report.pdf") == (1, 1)
    assert shim.pm.pm_match("temp.txt") is None
    assert shim.pm.pm_match("/safe/notes.txt") == (2, 2)
    # first created policy wins on overlap
    assert shim.pm.pm_match("/safe/x.pdf")[0] == 1
    assert [e.file_id for e in shim.device.policies.registry] == [1, 2, 3]


def test_open_after_delete_sees_tombstone(shim):
    shim.spm_submit("PolicyCreate {FileRule=*.txt} {RT=1d}")
    h = shim.open("a.txt")
    assert h.ids == (1, 1)
    shim.close(h)
    assert h.ids is None
    shim.spm_submit("PolicyDelete {Id=1}")
    assert shim.open("a.txt").ids is None
    with pytest.raises(UnknownPolicy):
        shim.spm_submit("PolicyDelete {Id=7}")


def test_split_arithmetic():
    dev = make_device(NandGeometry(4096, 8, 64, 16))
    shim = HostShim(dev)
    dev.command_log = []
    shim.spm_submit("PolicyCreate {FileRule=*} {RT=1d}")
    shim.write_file("f", b"\x01" * 8192)
    writes = [c for c in dev.command_log if c[0] == "WRITE"]
    assert len(writes) == 1
    chain = [dev.chain_walk(l)[0] for l in shim.lba_list("f")]
    assert [e.oob.file_offset for e in chain] == [0, 4096]


def test_one_byte_write_is_read_modify_write(shim):
    shim.spm_submit("PolicyCreate {FileRule=*} {RT=1d}")
    shim.write_file("f", bytes(range(200)) * 4)
    shim.write_file("f", b"\xff", offset=5)
    expect = bytearray(bytes(range(200)) * 4)
    expect[5] = 0xFF
    assert shim.read_file("f") == bytes(expect)
    lba = shim.lba_list("f")[0]
    chain = shim.device.chain_walk(lba)
    assert len(chain) == 2 and chain[0].oob.file_offset == 0


def test_lba_list_and_unknown(shim):
    shim.write_file("f", b"a" * (3 * PS + 1))
    assert len(shim.lba_list("f")) == 4
    with pytest.raises(UnknownFile):
        shim.lba_list("nope")


def test_twenty_megabyte_file_pages():
    assert 20 * 1024 * 1024 // 4096 == 5120


def test_lba_lists_disjoint_after_delete(shim):
    shim.write_file("a", b"a" * 3 * PS)
    shim.write_file("b", b"b" * 2 * PS)
    shim.delete("a")
    shim.write_file("c", b"c" * 4 * PS)
    la, lc = set(shim.lba_list("b")), set(shim.lba_list("c"))
    assert not la & lc
    assert shim.read_file("b") == b"b" * 2 * PS


def test_allocator_reuses_lowest_first():
    a = LbaAllocator(10)
    assert a.take(4) == [0, 1, 2, 3]
    a.release([2, 1])
    assert a.take(3) == [1, 2, 4]


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(0, 3 * PS), st.binary(min_size=1, max_size=2 * PS)),
                min_size=1, max_size=12))
def test_random_writes_match_shadow_file(ops):
    shim = HostShim(make_device())
    shim.spm_submit("PolicyCreate {FileRule=*} {RT=1d}")
    shadow = bytearray()
    for off, blob in ops:
        shim.write_file("f", blob, off)
        if len(shadow) < off + len(blob):
            shadow.extend(bytes(off + len(blob) - len(shadow)))
        shadow[off: off + len(blob)] = blob
        for m in shim.device.chain_walk(shim.lba_list("f")[0])[:1]:
            assert m.oob.file_offset == 0
    assert shim.read_file("f") == bytes(shadow)
    rng = random.Random(len(ops))
    for _ in range(10):
        o = rng.randrange(len(shadow))
        n = rng.randrange(1, 2 * PS)
        assert shim.read_file("f", o, n) == bytes(shadow[o: o + n])
    # pmeta offsets stay page aligned and inside the file
    dev = shim.device
    for lba in shim.lba_list("f"):
        for e in dev.chain_walk(lba):
            assert e.oob.file_offset % PS == 0 and e.oob.file_offset < len(shadow)


def test_pm_match_replay_reproduces_assignments():
    names = [f"/d{i % 3}/f{i}.{'pdf' if i % 2 else 'txt'}" for i in range(30)]
    rules = ["*.pdf", "/d1/*"]

    def run():
        shim = HostShim(make_device())
        for r in rules:
            shim.spm_submit(f"PolicyCreate {{FileRule={r}}} {{RT=1d}}")
        return [shim.pm.pm_match(n) for n in names]

    assert run() == run()


def _stream(piggyback):
    dev = make_device()
    dev.command_log = []
    shim = HostShim(dev, piggyback=piggyback)
    rng = random.Random(9)
    for i in range(40):
        name = f"f{rng.randrange(5)}"
        shim.write_file(name, rng.randbytes(rng.randrange(1, 3 * PS)), rng.randrange(2 * PS))
    return dev.command_log, dev.state_digest()


def test_unversioned_path_parity():
    assert _stream(True) == _stream(False)


def test_adopt_rewrites_with_policy(shim):
    shim.write_file("late.txt", b"x" * 2 * PS)
    shim.spm_submit("PolicyCreate {FileRule=*.txt} {RT=1d}")
    assert shim.adopt("late.txt") == (1, 1)
    for lba in shim.lba_list("late.txt"):
        assert shim.device.chain_walk(lba)[0].oob.policy_id == 1
    assert shim.read_file("late.txt") == b"x" * 2 * PS


def test_json_round_trip(shim):
    shim.spm_submit("PolicyCreate {FileRule=*} {RT=1d}")
    shim.write_file("a", b"q" * 700)
    again = HostShim.from_json(shim.device, shim.to_json())
    assert again.read_file("a") == b"q" * 700
    assert again.to_json() == shim.to_json()
    again.spm_submit("PolicyCreate {FileRule=b} {RT=1d}")
