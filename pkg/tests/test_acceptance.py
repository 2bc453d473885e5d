"""Acceptance criteria 1-11, one test each.

Every test records a PASS or FAIL line; conftest prints them in the terminal
summary, and running this file directly prints them without pytest.
"""

import functools
import random
import sys
import time

from hypothesis import HealthCheck, given, settings

from ffskit.alloc import fragtbl8, hashalloc, mapsearch
from ffskit.bufcache import BufCache, CacheConfig
from ffskit.ccd import CcdConfig, build_table, map_block
from ffskit.devimg import (DISKMAGIC, default_label, dkcksum, label_bytes, label_checksum,
                           parse_label)
from ffskit.fs import Filesystem
from ffskit.inode import Cred
from ffskit.layout import CylGroup, Superblock
from ffskit.namespace import DESIREDVNODES, desired_vnodes
from ffskit.quota import (GRPQUOTA, USRQUOTA, QuotaRecord, block_decision, inode_decision,
                          quota_mismatches, quotacheck, rebuild)

from conftest import MiB, FakeClock, make_image
from fsmodel import Fuzzer
from test_alloc import ProbeFs, block_bits, exact_runs, mapsearch_oracle, sb_for
from test_bufcache import randomized_trace
from test_ccd import layout_oracle
from test_devimg import labels
from test_layout import sb8k, superblocks

RESULTS: dict[int, tuple[str, str, str]] = {}


def criterion(n: int, title: str):
    def deco(fn):
        @functools.wraps(fn)
        def run(*args, **kw):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kw)
            except BaseException as e:
                RESULTS[n] = ("FAIL", title, f"{type(e).__name__}: {e}".splitlines()[0][:160])
                print(line(n))
                raise
            RESULTS[n] = ("PASS", title, f"{detail} ({time.perf_counter() - t0:.1f}s)")
            print(line(n))
        run.criterion = n
        return run
    return deco


def line(n: int) -> str:
    status, title, detail = RESULTS[n]
    return f"criterion {n:2d} {status}  {title}: {detail}"


@criterion(1, "buffer sizing at 128 MiB / 8 KiB pages")
def test_c01_buffer_sizing():
    t0 = time.perf_counter()
    bc = BufCache(CacheConfig(physmem_bytes=128 * MiB, page_size=8192))
    assert bc.nbuf == 832
    assert bc.arena_bytes == 6656 * 1024
    assert time.perf_counter() - t0 < 1
    return f"nbuf={bc.nbuf} arena={bc.arena_bytes // 1024} KiB"


@criterion(2, "11000-byte file on 4096/1024")
def test_c02_eleven_thousand_bytes(tmp_path):
    path = make_image(tmp_path / "c2.img", 16 * MiB, bsize=4096, fsize=1024)
    fs = Filesystem.mount(path, clock=FakeClock())
    # mkfs leaves loose fragments in group 0; use them up so the tail must split a block
    n = 0
    while fs.cs[0].cs_nffree:
        fs.write_file(f"/pad{n}", b"p" * 1000)
        n += 1
    before = fs.sb.fs_cstotal.copy()
    fs.write_file("/f", bytes(random.Random(2).randbytes(11000)))
    after = fs.sb.fs_cstotal
    ip = fs.lookup("/f")
    blocks = ip.din.di_blocks
    fs.iput(ip)
    dnb = after.cs_nbfree - before.cs_nbfree
    dnf = after.cs_nffree - before.cs_nffree
    bp, cg = fs.getcg(0)
    fs.relcg(bp)
    # 2 whole blocks plus one block split 3 used / 1 free
    assert (dnb, dnf, blocks) == (-3, 1, 2 * 4 + 3)
    assert cg.cg_frsum[1] == 1
    fs.unmount()
    return f"nbfree {dnb:+d}, nffree {dnf:+d}, di_blocks {blocks} (2 blocks + 3 frags)"


@criterion(3, "fragtbl vs run-existence oracle")
def test_c03_fragtbl():
    t0 = time.perf_counter()
    checked = 0
    for m in range(256):
        runs = exact_runs(block_bits(m, 0, 8))
        for s in range(1, 9):
            assert bool(fragtbl8[m] & (1 << (s - 1))) == (s in runs), (m, s)
            checked += 1
    assert fragtbl8[0x07] == 0x04
    assert fragtbl8[0xFF] & 0x80
    assert time.perf_counter() - t0 < 1
    return f"{checked} (byte, size) pairs; 0x07->0x04, 0xFF has 0x80"


@criterion(4, "mapsearch vs linear scan")
def test_c04_mapsearch():
    rng = random.Random(4)
    cases = mismatches = 0
    while cases < 10_000:
        frag = rng.choice([1, 2, 4, 8])
        sb = sb_for(frag, fpg=8 * rng.choice([1, 2, 8, 16]))
        nbytes = sb.fs_fpg // 8
        density = rng.random()
        freemap = bytes(sum(1 << b for b in range(8) if rng.random() < density)
                        for _ in range(nbytes))
        cg = CylGroup.empty(0, 1, 8, sb.fs_fpg, sb.fs_fpg)
        cg.blkfree[:] = freemap
        allocsiz = rng.randint(1, frag)
        startbyte = rng.randrange(nbytes)
        cg.cg_frotor = startbyte * 8
        want = mapsearch_oracle(sb, freemap, startbyte, allocsiz)
        if want is None:
            continue
        cases += 1
        mismatches += mapsearch(sb, cg, 0, allocsiz) != want
    assert mismatches == 0
    return f"{cases} instances, {mismatches} mismatches"


@criterion(5, "hashalloc probe order, ncg=8 start=5")
def test_c05_hashalloc():
    probes = []
    hashalloc(ProbeFs(), 5, 0, None, lambda fs, c, p, w: 0, probes)
    assert probes == [5, 6, 7, 1] + list(range(2, 8))
    return "probes " + ",".join(map(str, probes))


@criterion(6, "ccd table for sizes (5,3,7), ileave 1")
def test_c06_ccd():
    t = build_table(CcdConfig.from_sizes([5, 3, 7], ileave=1))
    rows = [r.astuple() for r in t.rows]
    assert rows == [(3, 0, 0, [0, 1, 2]), (2, 9, 3, [0, 2]), (1, 13, 5, [2])]
    assert map_block(t, 13) == (2, 5)
    mapped = [map_block(t, b) for b in range(15)]
    assert len(set(mapped)) == 15 == t.total
    assert mapped == layout_oracle([5, 3, 7], 1)
    return "3 rows match; block 13 -> (2, 5); 15/15 blocks bijective"


@criterion(7, "desiredvnodes at MAXUSERS=64")
def test_c07_desiredvnodes(tmp_path):
    assert desired_vnodes(64) == DESIREDVNODES == 1354
    path = make_image(tmp_path / "c7.img", 16 * MiB)
    fs = Filesystem.mount(path, clock=FakeClock())
    assert fs.ncache.capacity == fs.vnodes.desired == 1354
    fs.unmount()
    return "1354; name cache capacity 1354"


@criterion(8, "buffer cache policy over 1e5 random operations")
def test_c08_cache_trace():
    t0 = time.perf_counter()
    violations, bc = randomized_trace(100_000, seed=8)
    elapsed = time.perf_counter() - t0
    assert violations == []
    assert bc.stats.delwri_flushed > 0 and bc.stats.evictions > 0
    assert elapsed < 30
    return (f"0 violations, {bc.stats.evictions} evictions, "
            f"{bc.stats.delwri_flushed} delayed-write flushes")


@criterion(9, "filesystem fuzz, 1e4 operations on 64 MiB")
def test_c09_fs_fuzz(tmp_path):
    path = make_image(tmp_path / "c9.img", 64 * MiB)
    fs = Filesystem.mount(path, clock=FakeClock())
    fz = Fuzzer(fs, seed=9)
    for _ in range(10_000):
        fz.step()
    fz.verify(deep=True)
    findings = fz.checkpoint()
    got, want = fz.nlink_total()
    violations = list(fs.checker.violations)
    fs.unmount()
    assert findings == []
    assert got == want
    assert violations == []
    ops = sum(fz.counts.values())
    return f"{ops} ops, fsck 0 findings, nlink {got}=={want}, 0 ordering violations"


@criterion(10, "quota decision grid and recount after fuzz")
def test_c10_quota(tmp_path):
    now = 5000
    # soft 10, hard 20; rows fix usage and grace, columns the resulting usage
    rows = {"under-soft": (5, 0), "in-grace": (12, now + 100), "past-grace": (12, now - 1)}
    expect = {"under-soft": (True, True, False), "in-grace": (True, True, False),
              "past-grace": (False, False, False)}
    for decide, field in ((block_decision, "b"), (inode_decision, "i")):
        for row, (cur, deadline) in rows.items():
            got = []
            for target in (15, 20, 21):
                if field == "b":
                    rec = QuotaRecord(dqb_bhardlimit=20, dqb_bsoftlimit=10, dqb_curblocks=cur,
                                      dqb_btime=deadline)
                else:
                    rec = QuotaRecord(dqb_ihardlimit=20, dqb_isoftlimit=10, dqb_curinodes=cur,
                                      dqb_itime=deadline)
                got.append(decide(rec, target - cur, now)[0])
            assert tuple(got) == expect[row], (field, row, got)

    path = make_image(tmp_path / "c10.img", 32 * MiB)
    fs = Filesystem.mount(path, clock=FakeClock())
    for t, name in ((USRQUOTA, "/quota.user"), (GRPQUOTA, "/quota.group")):
        fs.iput(fs.create(name))
        fs.quota.quota_on(t, name)
    rebuild(fs)
    fz = Fuzzer(fs, seed=10, max_file=80_000, reserved=("quota.user", "quota.group"))
    for _ in range(3000):
        fz.step()
    fz.verify(deep=False)
    # the fuzzer acts as root; add files owned by several unprivileged users
    rng = random.Random(10)
    owned = []
    for i in range(300):
        if owned and rng.random() < .3:
            fs.unlink(owned.pop(rng.randrange(len(owned))))
            continue
        cred = Cred(uid=rng.choice([100, 200, 300]), privileged=False)
        ip = fs.create(f"/own{i}", cred=cred)
        fs.write(ip, 0, rng.randbytes(rng.randrange(40_000)), cred=cred)
        if rng.random() < .3:
            fs.truncate(ip, rng.randrange(20_000), cred=cred)
        fs.iput(ip)
        owned.append(f"/own{i}")
    mism = quota_mismatches(fs)
    counted = quotacheck(fs)
    fs.unmount()
    assert mism == []
    assert {i for t, i in counted if t == USRQUOTA} >= {0, 100, 200, 300}
    return f"18/18 grid cells; recount equal for {len(counted)} (type, id) pairs"


@criterion(11, "label and superblock serialize/parse identity")
def test_c11_roundtrips():
    count = {"label": 0, "sb": 0}
    cfg = settings(max_examples=1000, deadline=None, database=None,
                   suppress_health_check=list(HealthCheck))

    @cfg
    @given(labels())
    def label_identity(lab):
        lab.validate()
        lab.d_checksum = label_checksum(lab)
        raw = label_bytes(lab)
        assert parse_label(raw) == lab
        assert dkcksum(raw, lab.d_npartitions) == 0
        count["label"] += 1

    @cfg
    @given(superblocks())
    def sb_identity(sb):
        assert Superblock.parse(sb.serialize()) == sb
        count["sb"] += 1

    label_identity()
    sb_identity()
    assert count["label"] >= 1000 and count["sb"] >= 1000
    raw = sb8k().serialize()
    assert raw[784:788] == bytes.fromhex("00011954")
    assert raw[744:752] == bytes.fromhex("0000400801018000")
    lab = default_label(131072)
    lab.d_checksum = label_checksum(lab)
    assert label_bytes(lab)[:4] == DISKMAGIC.to_bytes(4, "big")
    return f"{count['label']} labels, {count['sb']} superblocks; golden bytes stable"


def main() -> int:
    import tempfile
    from pathlib import Path

    tests = sorted((f for f in globals().values() if hasattr(f, "criterion")),
                   key=lambda f: f.criterion)
    failed = 0
    for fn in tests:
        kw = {}
        if "tmp_path" in fn.__wrapped__.__code__.co_varnames:
            kw["tmp_path"] = Path(tempfile.mkdtemp(prefix=f"c{fn.criterion}-"))
        try:
            fn(**kw)
        except BaseException:
            failed += 1
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
