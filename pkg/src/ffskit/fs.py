"""A mounted filesystem: ties the device, buffer cache, allocator, inodes and names together."""

from __future__ import annotations

import errno
import time
from collections import Counter
from dataclasses import dataclass

from . import inode as _inode
from . import namespace as ns
from .bufcache import B, Buf, BufCache, CacheConfig
from .devimg import DEV_BSIZE, DiskImage, Panic, PartitionDev, open_image
from .inode import DEV, HOLE, IN, IN_TIMES, Cred, ROOTCRED, InodeHandle, IoCursor, fserr
from .layout import (IFDIR, IFLNK, IFMT, IFREG, ROOTINO, SBOFF, SBSIZE, CgSummary, CylGroup,
                     FormatError, Superblock, pack_csum, unpack_csum)
from .quota import QuotaSystem

VNOVAL = -1


class OrderingChecker:
    """Watches the event trace for the three synchronous-update ordering rules.

    1. an inode whose allocation or link count rose is written before a name for it is;
    2. every name is gone before the inode is freed;
    3. during a truncate the cleared pointers are written before any block is freed.
    """

    def __init__(self):
        self.unwritten: set[int] = set()
        self.pending: set[int] = set()
        self.names: Counter = Counter()
        self.trunc: dict[int, bool] = {}
        self.violations: list[str] = []
        self.seen = 0

    def feed(self, ev: tuple) -> None:
        self.seen += 1
        kind = ev[0]
        if kind in ("ialloc", "link"):
            self.unwritten.add(ev[1])
        elif kind == "iupdate":
            self.pending.add(ev[1])
        elif kind == "iwrite":
            lo, hi = ev[1], ev[2]
            done = {i for i in self.pending if lo <= i < hi}
            self.pending -= done
            self.unwritten -= done
            for i in done:
                if i in self.trunc:
                    self.trunc[i] = True
        elif kind == "enter":
            ino = ev[3]
            if ino in self.unwritten:
                self.violations.append(f"name {ev[2]!r} for inode {ino} entered before "
                                       "the inode reached the disk")
            if ev[2] not in (b".", b".."):
                self.names[ino] += 1
        elif kind == "remove":
            if ev[2] not in (b".", b".."):
                self.names[ev[3]] -= 1
        elif kind == "ifree":
            if self.names[ev[1]] > 0:
                self.violations.append(f"inode {ev[1]} freed with {self.names[ev[1]]} "
                                       "names still on disk")
            self.unwritten.discard(ev[1])
        elif kind == "itrunc":
            self.trunc[ev[1]] = False
        elif kind == "itrunc_end":
            self.trunc.pop(ev[1], None)
        elif kind == "blkfree":
            ino = ev[1]
            if self.trunc.get(ino) is False:
                self.violations.append(f"block {ev[2]} of inode {ino} freed before the "
                                       "truncated inode was written")


@dataclass
class Stat:
    st_ino: int
    st_mode: int
    st_nlink: int
    st_uid: int
    st_gid: int
    st_size: int
    st_blocks: int
    st_atime: int
    st_mtime: int
    st_ctime: int
    st_flags: int
    st_gen: int
    st_rdev: int = VNOVAL
    st_blksize: int = VNOVAL


class Filesystem:
    def __init__(self, dev: PartitionDev, sb: Superblock, cs: list[CgSummary], *,
                 cache_cfg: CacheConfig | None = None, clock=None,
                 desiredvnodes: int = ns.DESIREDVNODES, readonly: bool = False,
                 namecache: bool = True, record_events: bool = False,
                 check_order: bool = True, image: DiskImage | None = None):
        self.dev = dev
        self.sb = sb
        self.cs = cs
        self.readonly = readonly
        self.clock = clock or time.time
        self.image = image
        self._owns_image = False
        self.cache = BufCache(cache_cfg or CacheConfig(), strategy=self.strategy,
                              hold=self._hold, holdrele=self._holdrele)
        self.ihash: dict[int, InodeHandle] = {}
        self.vnodes = ns.VnodeTable(desiredvnodes, reclaim=_inode.reclaim)
        self.ncache = ns.NameCache(self.vnodes, desiredvnodes, enabled=namecache)
        self.quota = QuotaSystem(self)
        self.nstats: Counter = Counter(dir_searches=0)
        self.events: list[tuple] | None = [] if record_events else None
        self.checker = OrderingChecker() if check_order else None
        self.mounted = True

    # mounting

    @classmethod
    def mount(cls, image, letter: str = "a", readonly: bool = False, **kw) -> "Filesystem":
        owns = not isinstance(image, DiskImage)
        img = open_image(image) if owns else image
        try:
            fs = cls.mount_dev(PartitionDev.open(img, letter), readonly, image=img, **kw)
        except Exception:
            if owns:
                img.close()
            raise
        fs._owns_image = owns
        return fs

    @classmethod
    def mount_dev(cls, dev, readonly: bool = False, **kw) -> "Filesystem":
        """Mount from any object with ``size``, ``read`` and ``write`` in sectors."""
        raw = dev.read(SBOFF // DEV_BSIZE, SBSIZE // DEV_BSIZE)
        sb = Superblock.parse(raw)
        _sanity(sb, dev.size)
        cs_raw = dev.read(sb.fsbtodb(sb.fs_csaddr), sb.fs_cssize // DEV_BSIZE)
        cs = [unpack_csum(cs_raw, 16 * i) for i in range(sb.fs_ncg)]
        fs = cls(dev, sb, cs, readonly=readonly, **kw)
        if not readonly:
            sb.fs_clean = 0
            sb.fs_ronly = 0
            fs.sbupdate()
        return fs

    def unmount(self) -> None:
        if not self.mounted:
            return
        self.quota.shutdown()
        if not self.readonly:
            self.sync()
            for vp in list(self.vnodes.vnodes):
                if vp.usecount == 0 and vp.inode is not None:
                    self.vnodes.vrecycle(vp)
            self.sb.fs_clean = 1
            self.sbupdate()
        self.mounted = False
        if self.image is not None:
            self.image.flush()
            if self._owns_image:
                self.image.close()

    close = unmount

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.unmount()

    # clock and tracing

    def now(self) -> int:
        return int(self.clock())

    def clock_pair(self) -> tuple[int, int]:
        t = self.clock()
        sec = int(t)
        return sec, int(round((t - sec) * 1e9)) % 1_000_000_000

    def trace(self, ev: tuple) -> None:
        if self.checker is not None:
            self.checker.feed(ev)
        if self.events is not None:
            self.events.append(ev)

    # device glue

    def strategy(self, bp: Buf) -> None:
        sb = self.sb
        if bp.file != DEV and bp.blkno == bp.lblkno:
            ip = self.ihash.get(bp.file)
            if ip is not None:
                bp.blkno = _inode.bmap(ip, bp.lblkno)
        if bp.blkno == HOLE:
            if bp.flags & B.READ:
                bp.clrbuf()
                return
            raise Panic(f"strategy: write of {bp!r} to a hole")
        if bp.bcount % DEV_BSIZE:
            raise Panic(f"strategy: odd transfer size {bp.bcount}")
        sector = sb.fsbtodb(bp.blkno)
        nsec = bp.bcount // DEV_BSIZE
        if bp.flags & B.READ:
            bp.data[:bp.bcount] = self.dev.read(sector, nsec)
            bp.resid = 0
        else:
            self.dev.write(sector, bytes(bp.data[:bp.bcount]))
            if bp.file == DEV:
                self._note_write(bp.blkno, bp.bcount)

    def _note_write(self, blkno: int, nbytes: int) -> None:
        sb = self.sb
        c = sb.dtog(blkno)
        rel = blkno - sb.cgimin(c)
        area = sb.fs_ipg * 128 // sb.fs_fsize
        if 0 <= rel < area:
            per = sb.fs_fsize // 128
            lo = c * sb.fs_ipg + rel * per
            self.trace(("iwrite", lo, lo + nbytes // 128))

    def _hold(self, file) -> None:
        if file != DEV:
            ip = self.ihash.get(file)
            if ip is not None and ip.vnode is not None:
                self.vnodes.vhold(ip.vnode)

    def _holdrele(self, file) -> None:
        if file != DEV:
            ip = self.ihash.get(file)
            if ip is not None and ip.vnode is not None:
                self.vnodes.holdrele(ip.vnode)

    # cylinder groups

    def getcg(self, c: int) -> tuple[Buf, CylGroup]:
        sb = self.sb
        bp = self.cache.bread(DEV, sb.cgtod(c), sb.fs_bsize)
        cg = bp.private
        if not isinstance(cg, CylGroup):
            try:
                cg = CylGroup.parse(bytes(bp.data[:sb.fs_cgsize]))
            except FormatError as e:
                self.cache.brelse(bp)
                raise fserr(errno.EIO, f"cg {c}: {e}") from None
            bp.private = cg
        return bp, cg

    def putcg(self, bp: Buf, cg: CylGroup) -> None:
        raw = cg.serialize(self.sb.fs_bsize)
        bp.data[:len(raw)] = raw
        bp.private = cg
        self.cache.bdwrite(bp)

    def relcg(self, bp: Buf) -> None:
        self.cache.brelse(bp)

    # sync

    def sbupdate(self) -> None:
        """Write the summary area and the superblock synchronously."""
        if self.readonly:
            return
        sb = self.sb
        raw = b"".join(pack_csum(c) for c in self.cs)
        raw = raw.ljust(sb.fs_cssize, b"\0")
        for off in range(0, sb.fs_cssize, sb.fs_bsize):
            size = min(sb.fs_bsize, sb.fs_cssize - off)
            bp = self.cache.getblk(DEV, sb.fs_csaddr + sb.numfrags(off), size)
            bp.data[:size] = raw[off:off + size]
            self.cache.bwrite(bp)
        sb.fs_time = self.now()
        sb.fs_fmod = 0
        bp = self.cache.getblk(DEV, SBOFF // sb.fs_fsize, sb.fs_sbsize)
        bp.data[:sb.fs_sbsize] = sb.serialize()
        self.cache.bwrite(bp)

    def sync(self) -> None:
        if self.readonly:
            return
        for _ in range(2):
            for ip in list(self.ihash.values()):
                if ip.flags & IN_TIMES and ip.din.di_mode != 0:
                    _inode.update(ip, wait=False)
            self.quota.dqsync_all()
        self.cache.sync_all()
        self.sbupdate()
        if self.image is not None:
            self.image.flush()

    # inode and path convenience

    def iget(self, ino: int) -> InodeHandle:
        return _inode.iget(self, ino)

    def iput(self, ip: InodeHandle) -> None:
        _inode.iput(ip)

    def root(self) -> InodeHandle:
        return self.iget(ROOTINO)

    def namei(self, path, op=ns.LOOKUP, follow=True, start=None):
        if op != ns.LOOKUP and self.readonly:
            raise fserr(errno.EROFS)
        return ns.namei(self, path, op, follow, start)

    def lookup(self, path, follow: bool = True) -> InodeHandle:
        return ns.lookup(self, path, follow)

    def open(self, path, create: bool = False, cred: Cred = ROOTCRED) -> InodeHandle:
        if create:
            self._writable()
            return ns.create(self, path, cred=cred, exclusive=False)
        return ns.lookup(self, path)

    def create(self, path, mode: int = 0o644, cred: Cred = ROOTCRED) -> InodeHandle:
        self._writable()
        return ns.create(self, path, mode, cred)

    def mkdir(self, path, mode: int = 0o755, cred: Cred = ROOTCRED) -> None:
        self._writable()
        ns.mkdir(self, path, mode, cred)

    def unlink(self, path) -> None:
        self._writable()
        ns.remove(self, path)

    def rmdir(self, path) -> None:
        self._writable()
        ns.rmdir(self, path)

    def rename(self, src, dst) -> None:
        self._writable()
        ns.rename(self, src, dst)

    def link(self, target, path) -> None:
        self._writable()
        ns.link(self, target, path)

    def symlink(self, target, path, cred: Cred = ROOTCRED) -> None:
        self._writable()
        ns.symlink(self, target, path, cred)

    def readlink(self, path) -> bytes:
        return ns.readlink(self, path)

    def listdir(self, path="/") -> list[tuple[bytes, int, int]]:
        return ns.listdir(self, path)

    def read(self, ip: InodeHandle, offset: int, n: int) -> bytes:
        uio = IoCursor.reader(offset, n)
        _inode.read(ip, uio, noatime=self.readonly)
        return uio.data()

    def write(self, ip: InodeHandle, offset: int, data: bytes, sync: bool = False,
              append: bool = False, cred: Cred = ROOTCRED) -> int:
        flags = (_inode.IO_SYNC if sync else 0) | (_inode.IO_APPEND if append else 0)
        return _inode.write(ip, IoCursor.writer(offset, data), flags, cred)

    def truncate(self, ip: InodeHandle, length: int, cred: Cred = ROOTCRED) -> None:
        self._writable()
        _inode.truncate(ip, length, cred=cred)

    def read_file(self, path) -> bytes:
        ip = self.lookup(path)
        try:
            if ip.isdir:
                raise fserr(errno.EISDIR, str(path))
            return self.read(ip, 0, ip.size)
        finally:
            self.iput(ip)

    def write_file(self, path, data: bytes, offset: int = 0, cred: Cred = ROOTCRED) -> None:
        ip = self.open(path, create=True, cred=cred)
        try:
            self.write(ip, offset, data, cred=cred)
        finally:
            self.iput(ip)

    def truncate_path(self, path, length: int, cred: Cred = ROOTCRED) -> None:
        ip = self.lookup(path)
        try:
            self.truncate(ip, length, cred)
        finally:
            self.iput(ip)

    def stat(self, path, follow: bool = True) -> Stat:
        ip = self.lookup(path, follow)
        try:
            return self.stat_handle(ip)
        finally:
            self.iput(ip)

    @staticmethod
    def stat_handle(ip: InodeHandle) -> Stat:
        d = ip.din
        return Stat(ip.number, d.di_mode, d.di_nlink, d.di_uid, d.di_gid, d.di_size,
                    d.di_blocks, d.di_atime, d.di_mtime, d.di_ctime, d.di_flags, d.di_gen,
                    st_blksize=ip.fs.sb.fs_bsize)

    def set_flags(self, path, flags: int) -> None:
        ip = self.lookup(path, follow=False)
        try:
            ip.din.di_flags = flags
            ip.flags |= IN.CHANGE
            _inode.update(ip, wait=True)
        finally:
            self.iput(ip)

    def _writable(self) -> None:
        if self.readonly:
            raise fserr(errno.EROFS)

    # diagnostics

    def check_invariants(self) -> None:
        self.cache.check_invariants()
        self.vnodes.check_invariants()
        held = Counter(bp.file for bp in self.cache.bufs if bp.file not in (None, DEV))
        for ino, ip in self.ihash.items():
            assert ip.vnode is not None and ip.vnode.inode is ip, f"ihash {ino} detached"
            assert ip.vnode.holdcnt == held.get(ino, 0), (
                f"inode {ino}: holdcnt {ip.vnode.holdcnt} != {held.get(ino, 0)} buffers")

    def totals(self) -> CgSummary:
        t = CgSummary()
        for c in self.cs:
            t.add(c)
        return t


def _sanity(sb: Superblock, nsectors: int) -> None:
    bad = []
    if sb.fs_bsize <= 0 or sb.fs_bsize & (sb.fs_bsize - 1) or not 4096 <= sb.fs_bsize <= 65536:
        bad.append(f"bsize {sb.fs_bsize}")
    fsize = sb.fs_fsize
    if fsize <= 0 or fsize & (fsize - 1) or sb.fs_bsize // max(fsize, 1) > 8:
        bad.append(f"fsize {sb.fs_fsize}")
    if sb.fs_ncg <= 0 or sb.fs_ipg <= 0 or sb.fs_fpg <= 0:
        bad.append("empty geometry")
    if sb.fs_size * (sb.fs_fsize // DEV_BSIZE) > nsectors:
        bad.append("filesystem larger than its partition")
    if bad:
        raise FormatError("corrupt superblock: " + ", ".join(bad))


def mount(image, letter: str = "a", **kw) -> Filesystem:
    return Filesystem.mount(image, letter, **kw)


__all__ = ["Filesystem", "OrderingChecker", "Stat", "mount", "VNOVAL", "IFDIR", "IFLNK",
           "IFMT", "IFREG"]
