"""The BSD buffer cache.

Buffers are identified by ``(file, lblkno)`` and live on one of four free
lists (LOCKED, LRU, AGE, EMPTY) or are busy.  Their memory comes from a fixed
arena of pages that moves between headers as buffers grow and shrink.

Nothing here ever sleeps.  Where the kernel would wait, ``WouldBlock`` is
raised; where it would return NULL and expect a retry, ``getnewbuf`` returns
``None``.  Device I/O is synchronous: the strategy callable transfers data
and ``biodone`` runs immediately afterwards, so async buffers are released
before ``bawrite`` returns.
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import IntEnum, IntFlag
from typing import Callable, Hashable, Iterable

from .devimg import Panic

MAXBSIZE = 65536


class B(IntFlag):
    AGE = 0x0001
    ASYNC = 0x0004
    BUSY = 0x0010
    CACHE = 0x0020
    DELWRI = 0x0080
    DONE = 0x0200
    ERROR = 0x0800
    INVALID = 0x2000
    LOCKED = 0x4000
    NOCACHE = 0x8000
    READ = 0x00100000
    WANTED = 0x00800000
    VFLUSH = 0x04000000


class Q(IntEnum):
    LOCKED = 0
    LRU = 1
    AGE = 2
    EMPTY = 3


INVALHASH = -1


class WouldBlock(Exception):
    """The kernel would sleep here (busy buffer or no free buffer)."""


def hashinit(elements: int) -> tuple[int, int]:
    """Least power of two >= elements, and the matching mask."""
    if elements <= 0:
        raise ValueError("hashinit: bad cnt")
    size = 1
    while size < elements:
        size <<= 1
    return size, size - 1


def _filehash(file: Hashable) -> int:
    if isinstance(file, int):
        return file & 0xFFFFFFFF
    return zlib.crc32(repr(file).encode())


class Buf:
    __slots__ = ("index", "file", "lblkno", "blkno", "flags", "pages", "data",
                 "bcount", "resid", "error", "queue", "chain", "private", "ra")

    def __init__(self, index: int):
        self.index = index
        self.file = None
        self.lblkno = 0
        self.blkno = 0
        self.flags = B(0)
        self.pages: list[int] = []
        self.data = bytearray()
        self.bcount = 0
        self.resid = 0
        self.error: Exception | None = None
        self.queue: Q | None = None
        self.chain: int | None = None
        self.private = None
        self.ra = False

    @property
    def bufsize(self) -> int:
        return len(self.data)

    @property
    def identity(self):
        return (self.file, self.lblkno)

    def clrbuf(self) -> None:
        self.data[: self.bcount] = bytes(self.bcount)
        self.resid = 0

    def __repr__(self) -> str:
        return (f"<Buf #{self.index} {self.file!r}:{self.lblkno} blk={self.blkno} "
                f"size={self.bufsize} bcount={self.bcount} {self.flags!r} q={self.queue}>")


@dataclass
class CacheConfig:
    physmem_bytes: int = 64 * 1024 * 1024
    page_size: int = 8192
    bufpages: int | None = None
    nbuf: int | None = None

    def sizing(self) -> tuple[int, int]:
        ps = self.page_size
        if ps <= 0 or ps & (ps - 1):
            raise ValueError(f"page_size {ps} is not a power of two")
        bufpages = self.bufpages
        if bufpages is None:
            physmem = self.physmem_bytes // ps
            two_mb = (2 * 1024 * 1024) // ps
            if physmem < two_mb:
                bufpages = physmem // 10
            else:
                bufpages = (two_mb + physmem) // 20
        nbuf = self.nbuf if self.nbuf is not None else bufpages
        nbuf = max(nbuf, 16)
        return bufpages, nbuf


@dataclass
class FileBufLists:
    clean: dict = field(default_factory=dict)
    dirty: dict = field(default_factory=dict)
    numoutput: int = 0


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    delwri_flushed: int = 0
    reads: int = 0
    writes: int = 0
    async_writes: int = 0
    oublock: int = 0
    ra_issued: int = 0
    ra_hits: int = 0


Strategy = Callable[[Buf], None]


class BufCache:
    def __init__(self, cfg: CacheConfig | None = None, strategy: Strategy | None = None,
                 hold: Callable | None = None, holdrele: Callable | None = None):
        self.cfg = cfg or CacheConfig()
        self.page_size = self.cfg.page_size
        self.bufpages, self.nbuf = self.cfg.sizing()
        self.strategy = strategy
        self.hold = hold
        self.holdrele = holdrele
        self.stats = CacheStats()
        self.hashsize, self.hashmask = hashinit(self.nbuf)
        self.hashtbl: list[list[Buf]] = [[] for _ in range(self.hashsize)]
        self.invalhash: dict[int, Buf] = {}
        self.queues = [OrderedDict() for _ in Q]
        self.files: dict[Hashable, FileBufLists] = {}
        self.bufs = [Buf(i) for i in range(self.nbuf)]
        base, residual = divmod(self.bufpages, self.nbuf)
        page = 0
        for i, bp in enumerate(self.bufs):
            n = base + (1 if i < residual else 0)
            bp.pages = list(range(page, page + n))
            bp.data = bytearray(n * self.page_size)
            page += n
            bp.flags = B.INVALID
            self._binsinval(bp)
            self._binsheadfree(bp, Q.AGE if n else Q.EMPTY)

    @classmethod
    def bufinit(cls, cfg: CacheConfig, **kw) -> "BufCache":
        return cls(cfg, **kw)

    @property
    def arena_bytes(self) -> int:
        return self.bufpages * self.page_size

    def round_page(self, size: int) -> int:
        return (size + self.page_size - 1) & ~(self.page_size - 1)

    # list and hash plumbing

    def _binsheadfree(self, bp: Buf, q: Q) -> None:
        d = self.queues[q]
        d[bp.index] = bp
        d.move_to_end(bp.index, last=False)
        bp.queue = q

    def _binstailfree(self, bp: Buf, q: Q) -> None:
        self.queues[q][bp.index] = bp
        bp.queue = q

    def bremfree(self, bp: Buf) -> None:
        if bp.queue is None:
            raise Panic(f"bremfree: {bp!r} not on a free list")
        del self.queues[bp.queue][bp.index]
        bp.queue = None

    def _bufhash(self, file, lblkno: int) -> int:
        return (_filehash(file) + lblkno) & self.hashmask

    def _bremhash(self, bp: Buf) -> None:
        if bp.chain == INVALHASH:
            del self.invalhash[bp.index]
        elif bp.chain is not None:
            self.hashtbl[bp.chain].remove(bp)
        bp.chain = None

    def _binshash(self, bp: Buf, chain: int) -> None:
        self._bremhash(bp)
        self.hashtbl[chain].append(bp)
        bp.chain = chain

    def _binsinval(self, bp: Buf) -> None:
        self._bremhash(bp)
        self.invalhash[bp.index] = bp
        bp.chain = INVALHASH

    def _lists(self, file) -> FileBufLists:
        fl = self.files.get(file)
        if fl is None:
            fl = self.files[file] = FileBufLists()
        return fl

    def bgetvp(self, file, bp: Buf) -> None:
        if bp.file is not None:
            raise Panic("bgetvp: not free")
        bp.file = file
        self._lists(file).clean[bp.index] = bp
        if self.hold:
            self.hold(file)

    def brelvp(self, bp: Buf) -> None:
        file = bp.file
        if file is None:
            raise Panic("brelvp: NULL")
        fl = self.files[file]
        fl.clean.pop(bp.index, None)
        fl.dirty.pop(bp.index, None)
        if not fl.clean and not fl.dirty and fl.numoutput == 0:
            del self.files[file]
        bp.file = None
        if self.holdrele:
            self.holdrele(file)

    def reassignbuf(self, bp: Buf) -> None:
        fl = self._lists(bp.file)
        fl.clean.pop(bp.index, None)
        fl.dirty.pop(bp.index, None)
        if bp.flags & B.DELWRI:
            fl.dirty[bp.index] = bp
        else:
            fl.clean[bp.index] = bp

    # lookup and allocation

    def incore(self, file, lblkno: int) -> Buf | None:
        for bp in self.hashtbl[self._bufhash(file, lblkno)]:
            if bp.lblkno == lblkno and bp.file == file and not bp.flags & B.INVALID:
                return bp
        return None

    def getnewbuf(self) -> Buf | None:
        while True:
            age, lru = self.queues[Q.AGE], self.queues[Q.LRU]
            if age:
                bp = next(iter(age.values()))
            elif lru:
                bp = next(iter(lru.values()))
            else:
                raise WouldBlock("getnewbuf: no free buffers")
            self.bremfree(bp)
            if bp.flags & B.VFLUSH:
                # being synced: age it out and look again
                bp.flags = (bp.flags & ~B.VFLUSH) | B.AGE
                self._binstailfree(bp, Q.AGE)
                continue
            break
        bp.flags |= B.BUSY
        if bp.flags & B.DELWRI:
            bp.flags |= B.AGE
            self.stats.delwri_flushed += 1
            self.bawrite(bp)
            return None
        if bp.file is not None:
            if not bp.flags & B.INVALID:
                self.stats.evictions += 1
            self.brelvp(bp)
        bp.flags = B.BUSY
        bp.blkno = bp.lblkno = 0
        bp.error = None
        bp.resid = 0
        bp.bcount = 0
        bp.private = None
        bp.ra = False
        self._bremhash(bp)
        return bp

    def allocbuf(self, bp: Buf, size: int) -> None:
        desired = self.round_page(size)
        if desired > MAXBSIZE:
            raise Panic("allocbuf: buffer larger than MAXBSIZE requested")
        ps = self.page_size
        while bp.bufsize < desired:
            nbp = self.getnewbuf()
            if nbp is None:
                continue
            nbp.flags |= B.INVALID
            self._binsinval(nbp)
            amt = min(nbp.bufsize, desired - bp.bufsize)
            npages = amt // ps
            if npages:
                moved = nbp.pages[-npages:]
                del nbp.pages[-npages:]
                del nbp.data[-amt:]
                bp.pages.extend(moved)
                bp.data.extend(bytes(amt))
            if nbp.bcount > nbp.bufsize:
                nbp.bcount = nbp.bufsize
            self.brelse(nbp)
        if bp.bufsize > desired:
            empty = self.queues[Q.EMPTY]
            if empty:
                nbp = next(iter(empty.values()))
                self.bremfree(nbp)
                nbp.flags |= B.BUSY
                excess = bp.bufsize - desired
                npages = excess // ps
                nbp.pages.extend(bp.pages[-npages:])
                del bp.pages[-npages:]
                del bp.data[desired:]
                nbp.data = bytearray(excess)
                nbp.bcount = 0
                nbp.flags |= B.INVALID
                self.brelse(nbp)
        bp.bcount = size

    def getblk(self, file, lblkno: int, size: int) -> Buf:
        if size > MAXBSIZE:
            raise Panic("getblk: size larger than MAXBSIZE")
        while True:
            bp = self.incore(file, lblkno)
            if bp is not None:
                if bp.flags & B.BUSY:
                    bp.flags |= B.WANTED
                    raise WouldBlock(f"getblk: {file!r}:{lblkno} busy")
                bp.flags |= B.BUSY
                self.bremfree(bp)
                self.stats.hits += 1
                if bp.ra:
                    self.stats.ra_hits += 1
                    bp.ra = False
                break
            bp = self.getnewbuf()
            if bp is None:
                continue
            self._binshash(bp, self._bufhash(file, lblkno))
            bp.blkno = bp.lblkno = lblkno
            self.bgetvp(file, bp)
            self.stats.misses += 1
            break
        self.allocbuf(bp, size)
        return bp

    # I/O

    def _start(self, bp: Buf, strategy: Strategy | None) -> None:
        strat = strategy or self.strategy
        if strat is None:
            raise Panic("no strategy routine")
        if bp.flags & B.READ:
            self.stats.reads += 1
        else:
            self.stats.writes += 1
            if bp.flags & B.ASYNC:
                self.stats.async_writes += 1
        try:
            strat(bp)
        except OSError as e:
            bp.flags |= B.ERROR
            bp.error = e
        self.biodone(bp)

    def biodone(self, bp: Buf) -> None:
        if bp.flags & B.DONE:
            raise Panic("biodone already")
        bp.flags |= B.DONE
        if not bp.flags & B.READ:
            self.vwakeup(bp)
        if bp.flags & B.ASYNC:
            self.brelse(bp)
        else:
            bp.flags &= ~B.WANTED

    def vwakeup(self, bp: Buf) -> None:
        if bp.file is None:
            return
        fl = self.files.get(bp.file)
        if fl is None or fl.numoutput <= 0:
            raise Panic("vwakeup: neg numoutput")
        fl.numoutput -= 1

    @staticmethod
    def biowait(bp: Buf) -> Exception | None:
        if bp.flags & B.ERROR:
            return bp.error or OSError(5, "I/O error")
        return None

    def bio_doread(self, file, lblkno: int, size: int, async_: bool,
                   strategy: Strategy | None = None) -> Buf:
        bp = self.getblk(file, lblkno, size)
        if not bp.flags & (B.DONE | B.DELWRI):
            bp.flags |= B.READ | (B.ASYNC if async_ else 0)
            self._start(bp, strategy)
        elif async_:
            self.brelse(bp)
        return bp

    def bread(self, file, lblkno: int, size: int, strategy: Strategy | None = None) -> Buf:
        bp = self.bio_doread(file, lblkno, size, False, strategy)
        err = self.biowait(bp)
        if err is not None:
            self.brelse(bp)
            raise err
        return bp

    def breadn(self, file, lblkno: int, size: int, rablks: Iterable[int],
               rasizes: Iterable[int], strategy: Strategy | None = None) -> Buf:
        rablks, rasizes = list(rablks), list(rasizes)
        if len(rablks) != len(rasizes):
            raise ValueError("read-ahead arrays differ in length")
        bp = self.bio_doread(file, lblkno, size, False, strategy)
        for rab, ras in zip(rablks, rasizes):
            if self.incore(file, rab) is not None:
                continue
            try:
                rbp = self.bio_doread(file, rab, ras, True, strategy)
            except WouldBlock:
                continue
            rbp.ra = True
            self.stats.ra_issued += 1
        err = self.biowait(bp)
        if err is not None:
            self.brelse(bp)
            raise err
        return bp

    def breada(self, file, lblkno: int, size: int, rablkno: int, rabsize: int,
               strategy: Strategy | None = None) -> Buf:
        return self.breadn(file, lblkno, size, [rablkno], [rabsize], strategy)

    def brelse(self, bp: Buf) -> None:
        if not bp.flags & B.BUSY:
            raise Panic(f"brelse: {bp!r} not busy")
        if bp.flags & B.WANTED:
            bp.flags &= ~(B.WANTED | B.AGE)
        if bp.flags & (B.LOCKED | B.ERROR) == B.LOCKED | B.ERROR:
            bp.flags &= ~B.ERROR
        if bp.flags & (B.NOCACHE | B.ERROR):
            bp.flags |= B.INVALID
        if bp.flags & B.VFLUSH:
            bp.flags &= ~B.VFLUSH
            if bp.queue is not None:
                if not bp.flags & (B.ERROR | B.INVALID | B.LOCKED | B.AGE):
                    bp.flags = (bp.flags & ~(B.AGE | B.ASYNC | B.BUSY | B.NOCACHE)) | B.CACHE
                    return
                self.bremfree(bp)
        if bp.bufsize <= 0 or bp.flags & B.INVALID:
            bp.flags &= ~(B.DONE | B.DELWRI)
            if bp.file is not None:
                self.reassignbuf(bp)
                self.brelvp(bp)
            self._binsinval(bp)
            self._binsheadfree(bp, Q.EMPTY if bp.bufsize <= 0 else Q.AGE)
        else:
            if bp.flags & B.LOCKED:
                q = Q.LOCKED
            elif not bp.flags & B.AGE:
                q = Q.LRU
            else:
                q = Q.AGE
            self._binstailfree(bp, q)
        bp.flags = (bp.flags & ~(B.AGE | B.ASYNC | B.BUSY | B.NOCACHE)) | B.CACHE

    def bdwrite(self, bp: Buf) -> None:
        if not bp.flags & B.BUSY:
            raise Panic("bdwrite: buffer is not busy")
        if not bp.flags & B.DELWRI:
            bp.flags |= B.DELWRI
            self.stats.oublock += 1
            self.reassignbuf(bp)
        bp.flags &= ~B.DONE
        self.brelse(bp)

    def bawrite(self, bp: Buf, strategy: Strategy | None = None) -> None:
        bp.flags |= B.ASYNC
        self.bwrite(bp, strategy)

    def bwrite(self, bp: Buf, strategy: Strategy | None = None) -> None:
        """Write the buffer; synchronous writes raise the strategy's error."""
        if not bp.flags & B.BUSY:
            raise Panic("bwrite: buffer is not busy")
        sync = not bp.flags & B.ASYNC
        wasdelayed = bool(bp.flags & B.DELWRI)
        bp.flags &= ~(B.READ | B.DONE | B.ERROR | B.DELWRI)
        bp.error = None
        if wasdelayed:
            self.reassignbuf(bp)
        else:
            self.stats.oublock += 1
        if bp.file is not None:
            self._lists(bp.file).numoutput += 1
        self._start(bp, strategy)
        if sync:
            err = self.biowait(bp)
            self.brelse(bp)
            if err is not None:
                raise err

    # whole-file helpers

    def invalidate(self, file, lblkno: int) -> bool:
        """Throw away a cached block (dirty or not). Returns True if one was cached."""
        bp = self.incore(file, lblkno)
        if bp is None:
            return False
        if bp.flags & B.BUSY:
            raise WouldBlock(f"invalidate: {file!r}:{lblkno} busy")
        self.bremfree(bp)
        bp.flags = (bp.flags | B.BUSY | B.INVALID | B.NOCACHE) & ~B.DELWRI
        self.brelse(bp)
        return True

    def file_buffers(self, file) -> list[Buf]:
        fl = self.files.get(file)
        if fl is None:
            return []
        return list(fl.clean.values()) + list(fl.dirty.values())

    def invalbuf_from(self, file, first_lbn: int) -> int:
        """Invalidate every buffer of ``file`` at or past ``first_lbn``."""
        n = 0
        for bp in self.file_buffers(file):
            if bp.lblkno >= first_lbn and not bp.flags & B.INVALID:
                n += self.invalidate(file, bp.lblkno)
        return n

    def vflushbuf(self, file, sync: bool = True) -> None:
        fl = self.files.get(file)
        if fl is None:
            return
        for bp in list(fl.dirty.values()):
            if bp.flags & B.BUSY or not bp.flags & B.DELWRI:
                continue
            self.bremfree(bp)
            bp.flags |= B.BUSY
            if sync:
                self.bwrite(bp)
            else:
                self.bawrite(bp)

    def vinvalbuf(self, file, save: bool = True) -> None:
        if save:
            self.vflushbuf(file, sync=True)
        for bp in self.file_buffers(file):
            if bp.flags & B.BUSY:
                raise WouldBlock(f"vinvalbuf: {bp!r} busy")
            self.bremfree(bp)
            bp.flags = (bp.flags | B.BUSY | B.INVALID) & ~B.DELWRI
            self.brelse(bp)

    def sync_all(self, order: Callable | None = None) -> None:
        """Flush every delayed write.  ``order`` sorts the file keys."""
        keys = [k for k, fl in self.files.items() if fl.dirty]
        if order is not None:
            keys.sort(key=order)
        for k in keys:
            self.vflushbuf(k, sync=True)

    def dirty_count(self) -> int:
        return sum(len(fl.dirty) for fl in self.files.values())

    # diagnostics

    def check_invariants(self) -> None:
        """Raise AssertionError on any broken structural invariant."""
        pages = sorted(p for bp in self.bufs for p in bp.pages)
        assert pages == list(range(self.bufpages)), "page conservation"
        for q in Q:
            for idx, bp in self.queues[q].items():
                assert bp.index == idx and bp.queue == q, f"queue link {bp!r}"
        for bp in self.bufs:
            assert len(bp.data) == len(bp.pages) * self.page_size, f"data size {bp!r}"
            assert bp.bcount <= bp.bufsize, f"bcount {bp!r}"
            busy = bool(bp.flags & B.BUSY)
            assert busy == (bp.queue is None), f"busy/list {bp!r}"
            if bp.queue is not None:
                assert self.queues[bp.queue].get(bp.index) is bp
            if bp.flags & B.INVALID:
                assert bp.chain in (INVALHASH, None), f"invalid buffer hashed {bp!r}"
            if bp.chain is not None and bp.chain != INVALHASH:
                assert bp.file is not None
                assert bp.chain == self._bufhash(bp.file, bp.lblkno)
                assert bp in self.hashtbl[bp.chain]
            if bp.file is not None:
                fl = self.files[bp.file]
                on_dirty = bp.index in fl.dirty
                on_clean = bp.index in fl.clean
                assert on_dirty != on_clean, f"file list {bp!r}"
                assert on_dirty == bool(bp.flags & B.DELWRI), f"dirty list {bp!r}"
        for chain in self.hashtbl:
            keys = [(b.file, b.lblkno) for b in chain if not b.flags & B.INVALID]
            assert len(keys) == len(set(keys)), "duplicate identity"
