import errno
import struct

import pytest

from ffskit import inode as I
from ffskit.bufcache import B
from ffskit.devimg import Panic
from ffskit.fsck import fsck_lite
from ffskit.inode import HOLE, IN, SF_IMMUTABLE, UF_APPEND, Cred, IoCursor, bmap
from ffskit.layout import NDADDR

USER = Cred(uid=100, gid=100, privileged=False)


def raw_ptr(fs, addr, slot):
    """Read one block pointer straight off the device, bypassing the cache."""
    sector = fs.sb.fsbtodb(addr) + slot * 4 // 512
    return struct.unpack_from(">i", fs.dev.read(sector, 1), slot * 4 % 512)[0]


def test_iget_identity_and_errors(fs):
    a = fs.iget(2)
    b = fs.iget(2)
    assert a is b and a.usecount == 2
    fs.iput(a)
    fs.iput(b)
    with pytest.raises(OSError) as ei:
        fs.iget(0)
    assert ei.value.errno == errno.EINVAL
    blank = fs.iget(fs.sb.fs_ipg + 17)
    assert blank.din.di_mode == 0 and blank.size == 0
    fs.iput(blank)
    with pytest.raises(Panic):
        fs.iput(blank)


def test_dinode_survives_release(fs):
    fs.write_file("/a", b"hello")
    ip = fs.lookup("/a")
    snap = ip.din.serialize()
    fs.iput(ip)
    fs.sync()
    ip = fs.lookup("/a")
    assert ip.din.serialize() == snap
    fs.iput(ip)


def test_last_close_of_unlinked_file_frees_blocks(fs):
    before = fs.sb.fs_cstotal.copy()
    fs.write_file("/big", b"z" * 100_000)
    ip = fs.lookup("/big")
    fs.unlink("/big")
    used = fs.sb.fs_cstotal.copy()
    assert used.cs_nbfree < before.cs_nbfree
    assert fs.read(ip, 0, 10) == b"z" * 10
    fs.iput(ip)
    assert fs.sb.fs_cstotal == before


def test_bmap_boundaries_match_chain_walk(fs):
    sb = fs.sb
    nindir = sb.fs_nindir
    ip = fs.open("/sparse", create=True)
    for lbn in (0, NDADDR - 1, NDADDR, NDADDR + nindir - 1, NDADDR + nindir, NDADDR + nindir + 5):
        fs.write(ip, lbn * sb.fs_bsize, lbn.to_bytes(4, "big") * 2048)
    fs.sync()
    d = ip.din
    assert bmap(ip, 0) == d.di_db[0]
    assert bmap(ip, 1) == HOLE
    assert bmap(ip, NDADDR) == raw_ptr(fs, d.di_ib[0], 0)
    assert bmap(ip, NDADDR + nindir - 1) == raw_ptr(fs, d.di_ib[0], nindir - 1)
    level1 = raw_ptr(fs, d.di_ib[1], 0)
    assert bmap(ip, NDADDR + nindir) == raw_ptr(fs, level1, 0)
    assert bmap(ip, NDADDR + nindir + 5) == raw_ptr(fs, level1, 5)
    assert bmap(ip, NDADDR + nindir + 6) == HOLE
    assert I.indir_path(fs, NDADDR + nindir) == (1, [0, 0])
    assert I.indir_path(fs, NDADDR + nindir + nindir ** 2) == (2, [0, 0, 0])
    got = fs.read(ip, (NDADDR + nindir) * sb.fs_bsize, 8)
    assert got == (NDADDR + nindir).to_bytes(4, "big") * 2
    fs.iput(ip)
    with pytest.raises(OSError):
        bmap(ip, -1)


def test_sparse_write_leaves_holes(fs):
    sb = fs.sb
    def free_frags():
        return sb.fs_cstotal.cs_nbfree * sb.fs_frag + sb.fs_cstotal.cs_nffree
    before = free_frags()
    fs.write_file("/h", b"end", 10 * sb.fs_bsize)
    ip = fs.lookup("/h")
    assert [bmap(ip, b) for b in range(10)] == [HOLE] * 10
    assert ip.din.di_blocks == 1
    assert fs.read(ip, 0, 20) == bytes(20)
    assert fs.read_file("/h")[-3:] == b"end"
    fs.iput(ip)
    assert free_frags() == before - 1


def test_append_one_byte_extends_fragment_run(fs):
    data = bytes(range(256)) * 43
    fs.write_file("/f", data[:11000])
    ip = fs.lookup("/f")
    assert ip.din.di_blocks == 8 + 3
    fs.write(ip, 11000, b"!")
    assert ip.din.di_blocks == 8 + 3          # fragroundup(2809) is still three frags
    assert ip.size == 11001
    fs.write(ip, 11001, b"x" * 300)      # pushes past 3 frags
    assert ip.din.di_blocks == 8 + 4
    assert fs.read(ip, 0, 11301) == data[:11000] + b"!" + b"x" * 300
    fs.iput(ip)
    assert fsck_lite(fs) == []


def test_read_past_eof_and_chunks(fs):
    payload = bytes((i * 7) % 251 for i in range(20000))
    fs.write_file("/r", payload)
    ip = fs.lookup("/r")
    assert fs.read(ip, 20000, 100) == b""
    assert fs.read(ip, 50000, 1) == b""
    chunks = b"".join(fs.read(ip, off, 1000) for off in range(0, 20000, 1000))
    assert chunks == payload
    fs.iput(ip)


def test_sequential_read_keeps_next_block_incore(fs):
    sb = fs.sb
    fs.write_file("/seq", b"s" * 4 * sb.fs_bsize)
    fs.sync()
    ip = fs.lookup("/seq")
    fs.cache.vinvalbuf(ip.number)
    for lbn in range(3):
        fs.read(ip, lbn * sb.fs_bsize, sb.fs_bsize)
        assert fs.cache.incore(ip.number, lbn + 1) is not None
    assert fs.cache.stats.ra_hits >= 2
    fs.iput(ip)


def test_write_paths(fs):
    sb = fs.sb
    ip = fs.open("/w", create=True)
    st = fs.cache.stats
    a0 = st.async_writes
    fs.write(ip, 0, b"b" * sb.fs_bsize)
    assert st.async_writes == a0 + 1
    fs.write(ip, sb.fs_bsize, b"c" * 100)
    bp = fs.cache.incore(ip.number, 1)
    assert bp is not None and bp.flags & B.DELWRI
    on_disk = fs.dev.read(sb.fsbtodb(ip.din.di_db[1]), 1)
    assert on_disk[:100] != b"c" * 100
    assert fs.read(ip, sb.fs_bsize, 100) == b"c" * 100
    fs.iput(ip)


def test_immutable_and_append_flags(fs):
    fs.write_file("/imm", b"data")
    fs.set_flags("/imm", SF_IMMUTABLE)
    ip = fs.lookup("/imm")
    with pytest.raises(OSError) as ei:
        fs.write(ip, 0, b"x")
    assert ei.value.errno == errno.EPERM
    fs.iput(ip)
    fs.write_file("/app", b"data")
    fs.set_flags("/app", UF_APPEND)
    ip = fs.lookup("/app")
    with pytest.raises(OSError):
        fs.write(ip, 0, b"x")
    fs.write(ip, 0, b"more", append=True)
    assert fs.read(ip, 0, 100) == b"datamore"
    fs.iput(ip)


def test_truncate_to_zero_restores_counts(fs):
    before = fs.sb.fs_cstotal.copy()
    fs.write_file("/t", b"q" * (3 * fs.sb.fs_bsize))
    fs.truncate_path("/t", 0)
    ip = fs.lookup("/t")
    assert ip.din.di_blocks == 0 and ip.size == 0
    fs.iput(ip)
    after = fs.sb.fs_cstotal
    assert (after.cs_nbfree, after.cs_nffree) == (before.cs_nbfree, before.cs_nffree)


def test_truncate_shrinks_fragment_run(fs):
    fs.write_file("/t", b"q" * 11000)
    nf = fs.sb.fs_cstotal.cs_nffree
    fs.truncate_path("/t", 9000)
    # fragroundup(9000 - 8192) == 1024, so two of the three frags come back
    assert fs.sb.fs_cstotal.cs_nffree == nf + 2
    ip = fs.lookup("/t")
    assert ip.din.di_blocks == 9
    assert fs.read(ip, 0, 9000) == b"q" * 9000
    fs.iput(ip)


def test_truncate_grow_makes_holes(fs):
    sb = fs.sb
    before = sb.fs_cstotal.copy()
    fs.write_file("/g", b"")
    fs.truncate_path("/g", 5 * sb.fs_bsize + 123)
    assert (sb.fs_cstotal.cs_nbfree, sb.fs_cstotal.cs_nffree) == (before.cs_nbfree,
                                                                  before.cs_nffree)
    ip = fs.lookup("/g")
    assert ip.din.di_blocks == 0 and ip.size == 5 * sb.fs_bsize + 123
    assert fs.read(ip, 0, ip.size) == bytes(ip.size)
    fs.iput(ip)
    fs.write_file("/al", b"a" * sb.fs_bsize)
    nb = sb.fs_cstotal.cs_nbfree
    fs.truncate_path("/al", 3 * sb.fs_bsize)
    assert sb.fs_cstotal.cs_nbfree == nb
    assert fs.read_file("/al") == b"a" * sb.fs_bsize + bytes(2 * sb.fs_bsize)


def test_truncate_grow_widens_trailing_fragment(fs):
    fs.write_file("/tail", b"t" * 1500)         # two frags
    fs.truncate_path("/tail", 3000)             # same block: grows to three
    ip = fs.lookup("/tail")
    assert ip.din.di_blocks == 3
    fs.truncate_path("/tail", 20000)            # later block: old tail becomes a full block
    assert ip.din.di_blocks == 8
    assert fs.read(ip, 0, 20000) == b"t" * 1500 + bytes(18500)
    fs.iput(ip)
    assert fsck_lite(fs) == []


def test_update_timestamps_and_io(fs, clock):
    fs.write_file("/u", b"x")
    fs.sync()
    ip = fs.lookup("/u")
    writes = fs.cache.stats.writes
    I.update(ip, wait=True)
    assert fs.cache.stats.writes == writes          # nothing pending, nothing written
    clock.advance(500)
    ip.flags |= IN.CHANGE
    I.update(ip, wait=True)
    assert ip.din.di_ctime == clock()
    assert fs.cache.stats.writes == writes + 1
    fs.iput(ip)


def test_enospc_leaves_file_unchanged(small_fs):
    fs = small_fs
    sb = fs.sb
    fs.write_file("/keep", b"k" * 5000, cred=USER)
    ip = fs.lookup("/keep")
    din = ip.din.copy()
    fill = fs.open("/fill", create=True)
    chunk = b"f" * (256 * 1024)
    off = 0
    while sb.freespace(sb.fs_minfree) > 4 * sb.fs_frag:
        fs.write(fill, off, chunk)
        off += len(chunk)
    fs.iput(fill)
    with pytest.raises(OSError) as ei:
        fs.write(ip, 5000, b"k" * 200_000, cred=USER)
    assert ei.value.errno == errno.ENOSPC
    assert (ip.din.di_db, ip.din.di_ib, ip.din.di_blocks) == (din.di_db, din.di_ib,
                                                              din.di_blocks)
    assert ip.size == 5000 and fs.read(ip, 0, 6000) == b"k" * 5000
    fs.iput(ip)
    assert fsck_lite(fs) == []


def test_uiomove_across_segments():
    uio = IoCursor(0, [bytearray(3), bytearray(4)], IoCursor.READ)
    I.uiomove(b"abcdefg", 7, uio)
    assert uio.resid == 0 and uio.offset == 7
    assert bytes(uio.segments[0]) + bytes(uio.segments[1]) == b"abcdefg"
    w = IoCursor.writer(10, b"hello")
    buf = bytearray(2)
    I.uiomove(buf, 2, w)
    assert buf == b"he" and w.resid == 3 and w.offset == 12
