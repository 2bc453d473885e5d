import random
from collections import OrderedDict

import pytest

from ffskit.bufcache import B, BufCache, CacheConfig, Q, WouldBlock, hashinit
from ffskit.devimg import Panic

PS = 4096
KiB = 1024
MiB = 1024 * KiB


class Disk:
    """Dict-backed device; counts strategy calls and can inject errors."""

    def __init__(self):
        self.blocks: dict = {}
        self.calls: list = []
        self.fail: set = set()

    def __call__(self, bp):
        key = (bp.file, bp.lblkno)
        self.calls.append((key, bool(bp.flags & B.READ), bool(bp.flags & B.ASYNC)))
        if key in self.fail:
            raise OSError(5, "injected")
        if bp.flags & B.READ:
            data = self.blocks.get(key, b"").ljust(bp.bcount, b"\0")[: bp.bcount]
            bp.data[: bp.bcount] = data
        else:
            self.blocks[key] = bytes(bp.data[: bp.bcount])


def cache(nbuf=16, bufpages=16):
    # nbuf never drops below 16; bufpages controls how many headers hold pages
    disk = Disk()
    bc = BufCache(CacheConfig(page_size=PS, bufpages=bufpages, nbuf=nbuf), strategy=disk)
    return bc, disk


def queue(bc, q):
    return [bp.identity for bp in bc.queues[q].values()]


def test_boot_sizing():
    bc = BufCache(CacheConfig(physmem_bytes=128 * MiB, page_size=8192))
    assert (bc.bufpages, bc.nbuf) == (832, 832)
    assert bc.arena_bytes == 6656 * KiB
    assert (bc.hashsize, bc.hashmask) == (1024, 1023)


def test_small_memory_sizing():
    # 1 MiB / 8 KiB = 128 pages; a tenth is 12; nbuf floors at 16
    assert CacheConfig(physmem_bytes=1 * MiB, page_size=8192).sizing() == (12, 16)
    assert hashinit(832) == (1024, 1023)
    assert hashinit(1) == (1, 0)
    with pytest.raises(ValueError):
        hashinit(0)


def test_initial_lists():
    bc, _ = cache(nbuf=16, bufpages=4)
    assert len(bc.queues[Q.AGE]) == 4 and len(bc.queues[Q.EMPTY]) == 12
    bc.check_invariants()


def test_incore_hit_miss_nocache():
    bc, _ = cache()
    bp = bc.getblk("f", 7, PS)
    assert bp.bcount == PS and bp.queue is None
    assert bc.files["f"].clean[bp.index] is bp
    bp.flags |= B.DONE
    bc.brelse(bp)
    assert bc.incore("f", 7) is bp
    assert bc.incore("f", 8) is None
    bp = bc.getblk("f", 7, PS)
    bp.flags |= B.NOCACHE
    bc.brelse(bp)
    assert bc.incore("f", 7) is None
    assert next(iter(bc.queues[Q.AGE].values())) is bp and bp.file is None
    bc.check_invariants()


def test_getblk_busy_would_block():
    bc, _ = cache()
    bp = bc.getblk("f", 1, PS)
    with pytest.raises(WouldBlock):
        bc.getblk("f", 1, PS)
    assert bp.flags & B.WANTED


def test_getblk_hit_on_age_resident():
    bc, _ = cache()
    bp = bc.getblk("f", 1, PS)
    bp.data[:3] = b"abc"
    bp.flags |= B.AGE | B.DONE
    bc.brelse(bp)
    assert bp.queue == Q.AGE
    again = bc.getblk("f", 1, PS)
    assert again is bp and again.data[:3] == b"abc" and again.queue is None


def test_getnewbuf_prefers_age():
    bc, _ = cache(bufpages=2)
    a = bc.getblk("f", 1, PS)
    b = bc.getblk("f", 2, PS)
    b.flags |= B.DONE
    bc.brelse(b)                  # LRU = [b]
    a.flags |= B.DONE | B.AGE
    bc.brelse(a)                  # AGE = [a]
    assert bc.getnewbuf() is a


def test_getnewbuf_flushes_delayed_write():
    bc, disk = cache(bufpages=1)
    d = bc.getblk("f", 3, PS)
    d.data[:2] = b"hi"
    bc.bdwrite(d)
    assert queue(bc, Q.LRU) == [("f", 3)]
    assert bc.getnewbuf() is None
    assert disk.calls[-1] == (("f", 3), False, True)
    assert disk.blocks[("f", 3)][:2] == b"hi"
    assert queue(bc, Q.AGE) == [("f", 3)] and not d.flags & B.DELWRI
    assert bc.getnewbuf() is d


def test_getnewbuf_nothing_free():
    bc, _ = cache(bufpages=1)
    bc.getblk("f", 0, PS)
    with pytest.raises(WouldBlock):
        bc.getnewbuf()


def test_allocbuf_grow_empties_victim():
    bc, _ = cache(bufpages=4)
    bp = bc.getblk("f", 0, 2 * PS)
    assert bp.bufsize == 2 * PS and bp.bcount == 2 * PS
    assert len(bc.queues[Q.EMPTY]) == 13 and len(bc.queues[Q.AGE]) == 2
    victim = next(iter(bc.queues[Q.EMPTY].values()))
    assert victim.bufsize == 0
    bc.check_invariants()


def test_allocbuf_shrink_with_empty_header():
    bc, _ = cache(bufpages=4)
    bp = bc.getblk("f", 0, 2 * PS)
    bc.allocbuf(bp, PS)
    assert bp.bufsize == PS
    front = next(iter(bc.queues[Q.AGE].values()))
    assert front.bufsize == PS and front.flags & B.INVALID and len(bc.queues[Q.EMPTY]) == 12
    bc.check_invariants()


def test_allocbuf_shrink_without_empty_header():
    bc, _ = cache(bufpages=32)
    bp = bc.getblk("f", 0, 2 * PS)
    assert not bc.queues[Q.EMPTY]
    bc.allocbuf(bp, 100)
    assert bp.bufsize == 2 * PS and bp.bcount == 100


def test_allocbuf_limit():
    bc, _ = cache()
    bp = bc.getblk("f", 0, PS)
    with pytest.raises(Panic):
        bc.allocbuf(bp, 65536 + 1)


def test_bread_hits_after_cold_read():
    bc, disk = cache()
    disk.blocks[("f", 0)] = b"x" * PS
    bc.brelse(bc.bread("f", 0, PS))
    assert len(disk.calls) == 1
    bp = bc.bread("f", 0, PS)
    assert len(disk.calls) == 1 and bytes(bp.data[:PS]) == b"x" * PS
    bc.brelse(bp)


def test_bread_returns_delayed_data_without_io():
    bc, disk = cache()
    bp = bc.getblk("f", 5, PS)
    bp.data[:4] = b"dirt"
    bc.bdwrite(bp)
    bp = bc.bread("f", 5, PS)
    assert disk.calls == [] and bp.data[:4] == b"dirt"
    assert bp.flags & B.DELWRI
    bc.brelse(bp)


def test_bread_error_releases_invalid():
    bc, disk = cache()
    disk.fail.add(("f", 2))
    with pytest.raises(OSError):
        bc.bread("f", 2, PS)
    assert bc.incore("f", 2) is None
    bc.check_invariants()


def test_breadn_read_ahead():
    bc, disk = cache()
    bp = bc.breadn("f", 0, PS, [1], [PS])
    assert len(disk.calls) == 2 and disk.calls[1] == (("f", 1), True, True)
    assert bc.incore("f", 1) is not None
    bc.brelse(bp)
    bc.brelse(bc.breadn("f", 0, PS, [1], [PS]))
    assert len(disk.calls) == 2
    bc.brelse(bc.bread("f", 1, PS))
    assert bc.stats.ra_issued == 1 and bc.stats.ra_hits == 1


def test_breada_matches_breadn():
    runs = []
    for kind in ("n", "a"):
        bc, disk = cache()
        bp = bc.breadn("f", 4, PS, [9], [PS]) if kind == "n" else bc.breada("f", 4, PS, 9, PS)
        bc.brelse(bp)
        runs.append((disk.calls, queue(bc, Q.LRU), queue(bc, Q.AGE)))
    assert runs[0] == runs[1]


def test_brelse_placement():
    bc, _ = cache()
    plain = bc.getblk("f", 1, PS)
    plain.flags |= B.DONE
    bc.brelse(plain)
    assert queue(bc, Q.LRU)[-1] == ("f", 1)
    aged = bc.getblk("f", 2, PS)
    aged.flags |= B.DONE | B.AGE
    bc.brelse(aged)
    assert queue(bc, Q.AGE)[-1] == ("f", 2)
    nc = bc.getblk("f", 3, PS)
    nc.flags |= B.NOCACHE
    bc.brelse(nc)
    assert nc.queue == Q.AGE and next(iter(bc.queues[Q.AGE].values())) is nc
    assert nc.flags & B.INVALID and nc.index in bc.invalhash
    with pytest.raises(Panic):
        bc.brelse(nc)


def test_bdwrite_idempotent_membership():
    bc, _ = cache()
    for _ in range(2):
        bp = bc.getblk("f", 1, PS)
        bc.bdwrite(bp)
    assert list(bc.files["f"].dirty) == [bp.index]
    assert bc.incore("f", 1).flags & B.DELWRI
    assert bc.stats.oublock == 1


def test_bwrite_sync_and_async():
    bc, disk = cache()
    bp = bc.getblk("f", 1, PS)
    bc.bdwrite(bp)
    bc.bremfree(bp)
    bp.flags |= B.BUSY
    bc.bwrite(bp)
    assert bp.queue == Q.LRU and not bc.files["f"].dirty
    assert bc.stats.oublock == 1          # counted once, at bdwrite
    bp = bc.getblk("f", 2, PS)
    bc.bawrite(bp)
    assert disk.calls[-1] == (("f", 2), False, True)
    assert bp.queue == Q.LRU and bc.files["f"].numoutput == 0


class LruModel:
    """Reference free-list model for one-page getblk/brelse traces."""

    def __init__(self, n):
        self.age = OrderedDict((("empty", i), None) for i in range(n))
        self.lru: OrderedDict = OrderedDict()

    def access(self, key):
        evicted = None
        if key in self.lru:
            del self.lru[key]
        else:
            if self.age:
                victim, _ = self.age.popitem(last=False)
            else:
                victim, _ = self.lru.popitem(last=False)
            if victim[0] != "empty":
                evicted = victim
        self.lru[key] = None
        return evicted


def test_lru_order_matches_model():
    rng = random.Random(11)
    n = 16
    bc, _ = cache(nbuf=n, bufpages=n)
    model = LruModel(n)
    for _ in range(5000):
        key = ("f", rng.randrange(40))
        before = {bp.identity for bp in bc.bufs if bp.file is not None}
        bp = bc.getblk(*key, PS)
        bp.flags |= B.DONE
        bc.brelse(bp)
        after = {b.identity for b in bc.bufs if b.file is not None}
        evicted = model.access(key)
        assert before - after == ({evicted} if evicted else set())
        assert queue(bc, Q.LRU) == list(model.lru)


def randomized_trace(nops: int = 100_000, seed: int = 2024):
    """Random cache traffic against a content oracle, checking policy on every allocation.

    Returns (violations, cache); page conservation is asserted every seventh step.
    """
    rng = random.Random(seed)
    bc, disk = cache(nbuf=24, bufpages=32)
    truth: dict = {}
    violations = []
    orig = bc.getnewbuf

    def checked_getnewbuf():
        age, lru = bc.queues[Q.AGE], bc.queues[Q.LRU]
        expect = next(iter(age.values())) if age else next(iter(lru.values()), None)
        dirty = expect is not None and bool(expect.flags & B.DELWRI)
        key = expect.identity if expect is not None else None
        got = orig()
        if expect is None:
            violations.append("no candidate but no WouldBlock")
        elif dirty:
            if got is not None or disk.blocks.get(key) != truth.get(key):
                violations.append(f"dirty victim {key} not flushed")
        elif got is not expect:
            violations.append(f"picked {got!r} instead of {expect!r}")
        return got

    bc.getnewbuf = checked_getnewbuf

    def size_of(key):
        return PS * (1 + hash(key[1]) % 3)

    def check_content(bp, key):
        want = truth.get(key, b"").ljust(size_of(key), b"\0")
        if bytes(bp.data[: bp.bcount]) != want:
            violations.append(f"content mismatch at {key}")

    files = ("a", "b", "c")
    for step in range(nops):
        key = (rng.choice(files), rng.randrange(24))
        size = size_of(key)
        r = rng.random()
        if r < .35:
            bp = bc.bread(*key, size)
            check_content(bp, key)
            bp.flags |= B.AGE if rng.random() < .1 else 0
            # NOCACHE discards delayed data, so only clean buffers get it
            nocache = rng.random() < .05 and not bp.flags & B.DELWRI
            bp.flags |= B.NOCACHE if nocache else 0
            bc.brelse(bp)
            if nocache and bc.incore(*key) is not None:
                violations.append(f"NOCACHE buffer {key} still cached")
        elif r < .75:
            bp = bc.bread(*key, size)
            payload = rng.randbytes(16)
            off = rng.randrange(0, size - 16)
            bp.data[off:off + 16] = payload
            data = bytearray(truth.get(key, b"").ljust(size, b"\0"))
            data[off:off + 16] = payload
            truth[key] = bytes(data)
            w = rng.random()
            if w < .6:
                bc.bdwrite(bp)
            elif w < .8:
                bc.bawrite(bp)
            else:
                bc.bwrite(bp)
            if w >= .6 and disk.blocks.get(key) != truth[key]:
                violations.append(f"write of {key} did not reach the device")
        elif r < .85:
            other = (key[0], rng.randrange(24))
            bp = bc.breadn(*key, size, [other[1]], [size_of(other)])
            check_content(bp, key)
            bc.brelse(bp)
        elif r < .93:
            bp = bc.incore(*key)
            if bp is not None and bp.flags & B.DELWRI:
                bc.vflushbuf(key[0], sync=rng.random() < .5)
                if disk.blocks.get(key) != truth.get(key):
                    violations.append(f"vflushbuf lost {key}")
        elif r < .97:
            # clean invalidation only; dirty data stays authoritative
            bp = bc.incore(*key)
            if bp is not None and not bp.flags & B.DELWRI:
                bc.invalidate(*key)
                if bc.incore(*key) is not None:
                    violations.append("invalidate left a buffer")
        else:
            bc.sync_all()
            if bc.dirty_count():
                violations.append("sync_all left dirty buffers")
        if step % 7 == 0:
            bc.check_invariants()
    bc.check_invariants()
    bc.sync_all()
    for key, data in truth.items():
        if disk.blocks.get(key) != data:
            violations.append(f"final contents of {key} lost")
    return violations, bc


def test_randomized_trace_invariants():
    violations, bc = randomized_trace(100_000)
    assert violations == []
    assert bc.stats.delwri_flushed > 0 and bc.stats.evictions > 0
