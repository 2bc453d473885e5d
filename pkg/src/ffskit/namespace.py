"""Directories, pathname lookup, the name cache and the vnode table."""

from __future__ import annotations

import errno
import itertools
import struct
from collections import OrderedDict
from dataclasses import dataclass

from . import alloc
from .bufcache import hashinit
from .devimg import DEV_BSIZE, Panic
from .inode import (APPEND, IMMUTABLE, IN, IO_SYNC, ROOTCRED, Cred, InodeHandle, IoCursor,
                    balloc, fserr, iget, iput, readlink as _readlink_ip, truncate, update,
                    write)
from .layout import IFDIR, IFLNK, IFMT, IFREG, MAXSYMLINKLEN, ROOTINO

DIRBLKSIZ = DEV_BSIZE
MAXNAMLEN = 255
MAXSYMLINKS = 8
LINK_MAX = 32767

DT_UNKNOWN, DT_FIFO, DT_CHR, DT_DIR, DT_BLK, DT_REG, DT_LNK, DT_SOCK, DT_WHT = (
    0, 1, 2, 4, 6, 8, 10, 12, 14)

_IFTODT = {IFDIR: DT_DIR, IFREG: DT_REG, IFLNK: DT_LNK}

_DIRHDR = struct.Struct(">IHBB")

LOOKUP, CREATE, DELETE, RENAME = range(4)

VNON, VREG, VDIR, VBLK, VCHR, VLNK, VSOCK, VFIFO, VBAD = range(9)
_IFTOVT = {IFREG: VREG, IFDIR: VDIR, IFLNK: VLNK}


def iftodt(mode: int) -> int:
    return _IFTODT.get(mode & IFMT, DT_UNKNOWN)


def dirsiz(namlen: int) -> int:
    return 8 + ((namlen + 1 + 3) & ~3)


def desired_vnodes(maxusers: int = 64) -> int:
    nproc = 20 + 16 * maxusers
    ntext = 80 + nproc // 8
    return nproc + ntext + 100


DESIREDVNODES = desired_vnodes()


# directory chunks

@dataclass
class DirEntry:
    offset: int
    ino: int
    reclen: int
    type: int
    name: bytes

    @property
    def size(self) -> int:
        return dirsiz(len(self.name))


def pack_entry(ino: int, reclen: int, dtype: int, name: bytes) -> bytes:
    raw = _DIRHDR.pack(ino, reclen, dtype, len(name)) + name
    return raw + bytes(dirsiz(len(name)) - len(raw))


def parse_chunk(data, base: int) -> list[DirEntry]:
    """Entries of the 512-byte chunk at ``base``; raises EIO on corruption."""
    out = []
    off = 0
    while off < DIRBLKSIZ:
        if DIRBLKSIZ - off < 8:
            raise fserr(errno.EIO, f"bad dir chunk at {base}: tail {DIRBLKSIZ - off}")
        ino, reclen, dtype, namlen = _DIRHDR.unpack_from(data, base + off)
        if (reclen < 8 or reclen & 3 or off + reclen > DIRBLKSIZ
                or (ino and dirsiz(namlen) > reclen)):
            raise fserr(errno.EIO, f"bad dir entry at {base + off}")
        name = bytes(data[base + off + 8:base + off + 8 + namlen])
        out.append(DirEntry(base + off, ino, reclen, dtype, name))
        off += reclen
    return out


def _check_name(name: bytes) -> None:
    if not name or len(name) > MAXNAMLEN:
        raise fserr(errno.ENAMETOOLONG if name else errno.ENOENT, repr(name))
    if b"/" in name or b"\0" in name:
        raise fserr(errno.EINVAL, repr(name))


def _chunks(dp: InodeHandle):
    """Yield (block bytes, lbn, chunk base within the block, absolute offset) per chunk."""
    fs = dp.fs
    sb = fs.sb
    nblk = sb.lblkno(dp.size + sb.fs_bsize - 1)
    for lbn in range(nblk):
        size = sb.blksize(dp.size, lbn)
        bp = fs.cache.bread(dp.number, lbn, size)
        data = bytes(bp.data[:size])
        fs.cache.brelse(bp)
        for base in range(0, min(size, dp.size - sb.lblktosize(lbn)), DIRBLKSIZ):
            yield data, lbn, base, sb.lblktosize(lbn) + base


def dir_entries(dp: InodeHandle) -> list[DirEntry]:
    if not dp.isdir:
        raise fserr(errno.ENOTDIR)
    out = []
    for data, lbn, base, absoff in _chunks(dp):
        for e in parse_chunk(data, base):
            e.offset = absoff + (e.offset - base)
            out.append(e)
    return out


def dir_search(dp: InodeHandle, name: bytes) -> tuple[int, int] | None:
    """Find ``name``; on a miss, leave slot state for a later dir_enter."""
    if not dp.isdir:
        raise fserr(errno.ENOTDIR)
    dp.fs.nstats["dir_searches"] += 1
    needed = dirsiz(len(name))
    slot = None
    endoff = 0
    for data, lbn, base, absoff in _chunks(dp):
        for e in parse_chunk(data, base):
            rel = absoff + (e.offset - base)
            if e.ino:
                endoff = absoff + DIRBLKSIZ
                # length first, then the bytes
                if len(e.name) == len(name) and e.name == name:
                    dp.i_offset = rel
                    dp.i_reclen = e.reclen
                    dp.i_diroff = absoff
                    return e.ino, rel
                free = e.reclen - e.size
            else:
                free = e.reclen
            if slot is None and free >= needed:
                slot = (rel, e.reclen)
    if slot is None:
        dp.i_offset, dp.i_count = dp.size, 0
    else:
        dp.i_offset, dp.i_count = slot
    dp.i_endoff = endoff
    return None


def _dirblk(dp: InodeHandle, offset: int):
    fs = dp.fs
    lbn = fs.sb.lblkno(offset)
    bp = fs.cache.bread(dp.number, lbn, fs.sb.blksize(dp.size, lbn))
    return bp, fs.sb.blkoff(offset)


def dir_enter(dp: InodeHandle, name: bytes, ino: int, dtype: int, cred: Cred = ROOTCRED) -> None:
    """Place an entry in the slot found by the last failed dir_search."""
    fs = dp.fs
    sb = fs.sb
    cache = fs.cache
    _check_name(name)
    needed = dirsiz(len(name))
    if dp.i_count == 0:
        # grow by one fresh chunk
        offset = dp.size
        if sb.blkoff(offset) + DIRBLKSIZ > sb.fs_bsize:
            raise Panic("direnter: chunk straddles a block")
        bp = balloc(dp, offset, DIRBLKSIZ, sync=True, clrbuf=True, cred=cred)
        dp.size = offset + DIRBLKSIZ
        boff = sb.blkoff(offset)
        bp.data[boff:boff + DIRBLKSIZ] = pack_entry(ino, DIRBLKSIZ, dtype, name).ljust(
            DIRBLKSIZ, b"\0")
        dp.flags |= IN.CHANGE | IN.UPDATE
        cache.bwrite(bp)
        update(dp, wait=True)
    else:
        bp, boff = _dirblk(dp, dp.i_offset)
        hino, hreclen, htype, hnamlen = _DIRHDR.unpack_from(bp.data, boff)
        if hreclen != dp.i_count:
            cache.brelse(bp)
            raise Panic("direnter: slot moved")
        if hino == 0:
            bp.data[boff:boff + needed] = pack_entry(ino, hreclen, dtype, name)
        else:
            hsize = dirsiz(hnamlen)
            if hreclen - hsize < needed:
                cache.brelse(bp)
                raise Panic("direnter: compact")
            struct.pack_into(">H", bp.data, boff + 4, hsize)
            noff = boff + hsize
            bp.data[noff:noff + needed] = pack_entry(ino, hreclen - hsize, dtype, name)
        cache.bwrite(bp)
        dp.flags |= IN.CHANGE | IN.UPDATE
    dp.i_count = 0
    fs.trace(("enter", dp.number, name, ino))
    fs.ncache.cache_purge(dp.vnode)


def _find(dp: InodeHandle, name: bytes) -> tuple[DirEntry, DirEntry | None]:
    for data, lbn, base, absoff in _chunks(dp):
        prev = None
        for e in parse_chunk(data, base):
            if e.ino and e.name == name:
                e.offset = absoff + (e.offset - base)
                if prev is not None:
                    prev.offset = absoff + (prev.offset - base)
                return e, prev
            prev = e
    raise fserr(errno.ENOENT, name.decode(errors="replace"))


def dir_remove(dp: InodeHandle, name: bytes) -> int:
    """Remove ``name`` and return the inode it named."""
    fs = dp.fs
    e, prev = _find(dp, name)
    bp, boff = _dirblk(dp, e.offset)
    if prev is None:
        struct.pack_into(">I", bp.data, boff, 0)
    else:
        poff = fs.sb.blkoff(prev.offset)
        struct.pack_into(">H", bp.data, poff + 4, prev.reclen + e.reclen)
    fs.cache.bwrite(bp)
    dp.flags |= IN.CHANGE | IN.UPDATE
    fs.trace(("remove", dp.number, name, e.ino))
    fs.ncache.cache_purge(dp.vnode)
    return e.ino


def dir_rewrite(dp: InodeHandle, name: bytes, ino: int, dtype: int) -> int:
    """Point an existing entry at a different inode; returns the old one."""
    fs = dp.fs
    e, _ = _find(dp, name)
    bp, boff = _dirblk(dp, e.offset)
    struct.pack_into(">I", bp.data, boff, ino)
    struct.pack_into(">B", bp.data, boff + 6, dtype)
    fs.cache.bwrite(bp)
    dp.flags |= IN.CHANGE | IN.UPDATE
    fs.trace(("remove", dp.number, name, e.ino))
    fs.trace(("enter", dp.number, name, ino))
    fs.ncache.cache_purge(dp.vnode)
    return e.ino


def dir_empty(ip: InodeHandle) -> bool:
    for e in dir_entries(ip):
        if e.ino and e.name not in (b".", b".."):
            return False
    return True


# name cache

NEGATIVE = object()


@dataclass
class NameCacheStats:
    hits: int = 0
    neghits: int = 0
    misses: int = 0
    stale: int = 0
    enters: int = 0
    evictions: int = 0


class NameCache:
    """LRU of (dir id, dir capability, name) -> (vnode id, capability) or NEGATIVE."""

    def __init__(self, vnodes: "VnodeTable", capacity: int = DESIREDVNODES, enabled: bool = True):
        self.vnodes = vnodes
        self.capacity = capacity
        self.hashsize, _ = hashinit(capacity)
        self.enabled = enabled
        self.entries: OrderedDict = OrderedDict()
        self.stats = NameCacheStats()

    def __len__(self) -> int:
        return len(self.entries)

    def cache_lookup(self, dvp: "VnodeLite", name: bytes):
        """A live vnode, NEGATIVE, or None on a miss."""
        if not self.enabled:
            return None
        key = (dvp.id, dvp.capability, name)
        hit = self.entries.get(key)
        if hit is None:
            self.stats.misses += 1
            return None
        if hit is NEGATIVE:
            self.entries.move_to_end(key)
            self.stats.neghits += 1
            return NEGATIVE
        vid, cap = hit
        vp = self.vnodes.vnodes[vid]
        if vp.capability != cap or vp.inode is None:
            del self.entries[key]
            self.stats.stale += 1
            self.stats.misses += 1
            return None
        self.entries.move_to_end(key)
        self.stats.hits += 1
        return vp

    def cache_enter(self, dvp: "VnodeLite", name: bytes, vp: "VnodeLite | None") -> None:
        if not self.enabled or len(name) > MAXNAMLEN:
            return
        key = (dvp.id, dvp.capability, name)
        if key in self.entries:
            self.entries.move_to_end(key)
        elif len(self.entries) >= self.capacity:
            self.entries.popitem(last=False)
            self.stats.evictions += 1
        self.entries[key] = NEGATIVE if vp is None else (vp.id, vp.capability)
        self.stats.enters += 1

    def cache_purge(self, vp: "VnodeLite | None") -> None:
        """Invalidate every name for ``vp`` (and every name in it) by a new capability."""
        if vp is not None:
            vp.capability = self.vnodes.next_capability()


# vnode table

class VnodeLite:
    __slots__ = ("id", "capability", "usecount", "holdcnt", "type", "inode", "list")

    def __init__(self, id: int, capability: int):
        self.id = id
        self.capability = capability
        self.usecount = 0
        self.holdcnt = 0
        self.type = VNON
        self.inode: InodeHandle | None = None
        self.list = None

    def attach(self, ip: InodeHandle) -> None:
        self.inode = ip
        self.type = _IFTOVT.get(ip.din.di_mode & IFMT, VNON if ip.din.di_mode == 0 else VBAD)

    def __repr__(self) -> str:
        return (f"<vnode {self.id} cap={self.capability} use={self.usecount} "
                f"hold={self.holdcnt} {self.list} ino={self.inode.number if self.inode else None}>")


@dataclass
class VnodeStats:
    created: int = 0
    recycled: int = 0


class VnodeTable:
    def __init__(self, desired: int = DESIREDVNODES, reclaim=None):
        self.desired = desired
        self.reclaim = reclaim
        self.vnodes: list[VnodeLite] = []
        self.free: OrderedDict[int, VnodeLite] = OrderedDict()
        self.hold: OrderedDict[int, VnodeLite] = OrderedDict()
        self._caps = itertools.count(1)
        self.stats = VnodeStats()

    def next_capability(self) -> int:
        return next(self._caps)

    def _unlist(self, vp: VnodeLite) -> None:
        if vp.list == "free":
            del self.free[vp.id]
        elif vp.list == "hold":
            del self.hold[vp.id]
        vp.list = None

    def _park(self, vp: VnodeLite, head: bool = False) -> None:
        self._unlist(vp)
        if vp.holdcnt > 0 and vp.inode is not None:
            lst, vp.list = self.hold, "hold"
        else:
            lst, vp.list = self.free, "free"
        lst[vp.id] = vp
        if head:
            lst.move_to_end(vp.id, last=False)

    def getnewvnode(self) -> VnodeLite:
        if len(self.vnodes) < self.desired or not (self.free or self.hold):
            vp = VnodeLite(len(self.vnodes), self.next_capability())
            self.vnodes.append(vp)
            self.stats.created += 1
        else:
            vp = next(iter((self.free or self.hold).values()))
            self._recycle(vp)
        vp.usecount = 1
        vp.list = "active"
        return vp

    def _recycle(self, vp: VnodeLite) -> None:
        self._unlist(vp)
        vp.list = "recycling"
        ip = vp.inode
        if ip is not None and self.reclaim is not None:
            self.reclaim(ip)
        vp.inode = None
        vp.type = VNON
        vp.capability = self.next_capability()
        if vp.holdcnt:
            raise Panic(f"getnewvnode: {vp!r} still held")
        self.stats.recycled += 1

    def release_unused(self, vp: VnodeLite) -> None:
        vp.usecount = 0
        self._park(vp, head=True)

    def vget(self, vp: VnodeLite) -> None:
        if vp.inode is None or vp.list == "recycling":
            raise fserr(errno.ENOENT, "vnode is being recycled")
        if vp.usecount == 0:
            self._unlist(vp)
            vp.list = "active"
        vp.usecount += 1

    def vref(self, vp: VnodeLite) -> None:
        if vp.usecount <= 0:
            raise Panic("vref used where vget required")
        vp.usecount += 1

    def vrele(self, vp: VnodeLite) -> None:
        if vp.usecount <= 0:
            raise Panic(f"vrele: {vp!r} negative ref count")
        vp.usecount -= 1
        if vp.usecount == 0:
            self._park(vp, head=vp.inode is None)

    vput = vrele

    def vhold(self, vp: VnodeLite) -> None:
        vp.holdcnt += 1
        if vp.usecount == 0 and vp.list == "free":
            self._unlist(vp)
            self.hold[vp.id] = vp
            vp.list = "hold"

    def holdrele(self, vp: VnodeLite) -> None:
        if vp.holdcnt <= 0:
            raise Panic(f"holdrele: {vp!r} holdcnt")
        vp.holdcnt -= 1
        if vp.holdcnt == 0 and vp.usecount == 0 and vp.list == "hold":
            self._unlist(vp)
            self.free[vp.id] = vp
            vp.list = "free"

    def vrecycle(self, vp: VnodeLite) -> bool:
        if vp.usecount:
            return False
        self._recycle(vp)
        self._park(vp, head=True)
        return True

    def vgone(self, vp: VnodeLite) -> None:
        """Disassociate a referenced vnode from its (freed) inode right away."""
        ip = vp.inode
        if ip is not None and self.reclaim is not None:
            self.reclaim(ip)
        vp.inode = None
        vp.type = VNON
        vp.capability = self.next_capability()

    def check_invariants(self) -> None:
        for vp in self.vnodes:
            if vp.usecount < 0 or vp.holdcnt < 0:
                raise AssertionError(f"negative count {vp!r}")
            if vp.usecount == 0 and vp.holdcnt == 0:
                assert vp.list == "free" and vp.id in self.free, vp
            elif vp.usecount == 0:
                assert vp.list in ("hold", "free"), vp
                if vp.inode is not None:
                    assert vp.list == "hold" and vp.id in self.hold, vp
            else:
                assert vp.list == "active", vp
        assert len(self.free) + len(self.hold) <= len(self.vnodes)


# pathname translation

@dataclass
class NameiResult:
    dp: InodeHandle | None
    ip: InodeHandle | None
    name: bytes
    expansions: int = 0

    def release(self) -> None:
        if self.ip is not None:
            iput(self.ip)
        if self.dp is not None:
            iput(self.dp)
        self.ip = self.dp = None


def _as_bytes(path) -> bytes:
    return path.encode() if isinstance(path, str) else bytes(path)


def _lookup_component(dp: InodeHandle, name: bytes, use_cache: bool, make_neg: bool):
    fs = dp.fs
    if name == b".":
        fs.vnodes.vref(dp.vnode)
        return dp
    if use_cache:
        hit = fs.ncache.cache_lookup(dp.vnode, name)
        if hit is NEGATIVE:
            return None
        if hit is not None:
            fs.vnodes.vget(hit)
            return hit.inode
    found = dir_search(dp, name)
    if found is None:
        if make_neg:
            fs.ncache.cache_enter(dp.vnode, name, None)
        return None
    ip = iget(fs, found[0])
    if ip.din.di_mode == 0:
        iput(ip)
        raise fserr(errno.EIO, f"entry {name!r} names a free inode")
    fs.ncache.cache_enter(dp.vnode, name, ip.vnode)
    return ip


def namei(fs, path, op: int = LOOKUP, follow: bool = True, start: InodeHandle | None = None,
          wantparent: bool = False) -> NameiResult:
    """Translate ``path``.  Returned handles are referenced; call .release()."""
    path = _as_bytes(path)
    if not path:
        raise fserr(errno.ENOENT, "empty path")
    if path.startswith(b"/") or start is None:
        dp = iget(fs, ROOTINO)
    else:
        fs.vnodes.vref(start.vnode)
        dp = start
    comps = [c for c in path.split(b"/") if c]
    expansions = 0
    try:
        if not comps:
            if op != LOOKUP:
                raise fserr(errno.EINVAL, "operation on the root")
            ip, dp = dp, None
            return NameiResult(None, ip, b".")
        while True:
            name = comps.pop(0)
            last = not comps
            if len(name) > MAXNAMLEN:
                raise fserr(errno.ENAMETOOLONG)
            if not dp.isdir:
                raise fserr(errno.ENOTDIR)
            if name == b".." and dp.number == ROOTINO:
                name = b"."
            # the last component of a modifying lookup needs fresh slot state
            use_cache = not last or op == LOOKUP
            ip = _lookup_component(dp, name, use_cache, make_neg=use_cache)
            if ip is None:
                if last and op in (CREATE, RENAME):
                    result = NameiResult(dp, None, name, expansions)
                    dp = None
                    return result
                raise fserr(errno.ENOENT, path.decode(errors="replace"))
            if ip.ifmt == IFLNK and (not last or follow):
                expansions += 1
                if expansions > MAXSYMLINKS:
                    iput(ip)
                    raise fserr(errno.ELOOP, path.decode(errors="replace"))
                target = _readlink_ip(ip)
                iput(ip)
                if not target:
                    raise fserr(errno.ENOENT, "empty symlink")
                comps = [c for c in target.split(b"/") if c] + comps
                if target.startswith(b"/"):
                    iput(dp)
                    dp = iget(fs, ROOTINO)
                if not comps:
                    comps = [b"."]
                continue
            if last:
                if op == LOOKUP and not wantparent:
                    iput(dp)
                    dp = None
                result = NameiResult(dp, ip, name, expansions)
                dp = None
                return result
            iput(dp)
            dp = ip
    finally:
        if dp is not None:
            iput(dp)


# name operations

def _makeinode(fs, dp: InodeHandle, mode: int, cred: Cred) -> InodeHandle:
    ino = alloc.valloc(fs, dp, mode)
    ip = iget(fs, ino)
    if ip.din.di_mode != 0:
        raise Panic(f"ffs_valloc: dup alloc ino={ino} mode=0{ip.din.di_mode:o}")
    d = ip.din
    if d.di_blocks:
        d.di_blocks = 0
    d.di_gen += 1
    d.di_mode = mode
    d.di_uid = cred.uid
    d.di_gid = dp.din.di_gid
    d.di_flags = 0
    d.di_size = 0
    d.di_db = [0] * len(d.di_db)
    d.di_ib = [0] * len(d.di_ib)
    ip.vnode.attach(ip)
    fs.quota.getinoquota(ip)
    try:
        fs.quota.chkiq(ip, 1, cred.privileged)
    except OSError:
        d.di_mode = 0
        ip.flags |= IN.CHANGE
        update(ip, wait=True)
        alloc.freefile(fs, ino, mode)
        fs.vnodes.vgone(ip.vnode)
        iput(ip)
        raise
    return ip


def create(fs, path, mode: int = 0o644, cred: Cred = ROOTCRED, start=None,
           exclusive: bool = True) -> InodeHandle:
    """Create a regular file; returns a referenced handle."""
    nd = namei(fs, path, CREATE, start=start)
    if nd.ip is not None:
        if exclusive:
            nd.release()
            raise fserr(errno.EEXIST, _as_bytes(path).decode(errors="replace"))
        if nd.ip.isdir:
            nd.release()
            raise fserr(errno.EISDIR, _as_bytes(path).decode(errors="replace"))
        iput(nd.dp)
        return nd.ip
    dp = nd.dp
    try:
        ip = _makeinode(fs, dp, IFREG | (mode & 0o7777), cred)
        ip.din.di_nlink = 1
        ip.flags |= IN.ACCESS | IN.CHANGE | IN.UPDATE
        # inode on disk before the name
        update(ip, wait=True)
        try:
            dir_enter(dp, nd.name, ip.number, DT_REG, cred)
        except OSError:
            ip.din.di_nlink = 0
            ip.flags |= IN.CHANGE
            iput(ip)
            raise
        update(dp, wait=False)
        return ip
    finally:
        iput(dp)


def mkdir(fs, path, mode: int = 0o755, cred: Cred = ROOTCRED, start=None) -> None:
    nd = namei(fs, path, CREATE, follow=False, start=start)
    if nd.ip is not None:
        nd.release()
        raise fserr(errno.EEXIST, _as_bytes(path).decode(errors="replace"))
    dp = nd.dp
    try:
        if dp.din.di_nlink >= LINK_MAX:
            raise fserr(errno.EMLINK)
        ip = _makeinode(fs, dp, IFDIR | (mode & 0o7777), cred)
        try:
            ip.din.di_nlink = 2
            ip.flags |= IN.ACCESS | IN.CHANGE | IN.UPDATE
            dp.din.di_nlink += 1
            dp.flags |= IN.CHANGE
            update(dp, wait=True)
            chunk = pack_entry(ip.number, 12, DT_DIR, b".")
            chunk += pack_entry(dp.number, DIRBLKSIZ - 12, DT_DIR, b"..")
            chunk = chunk.ljust(DIRBLKSIZ, b"\0")
            try:
                bp = balloc(ip, 0, DIRBLKSIZ, sync=True, clrbuf=True, cred=cred)
            except OSError:
                dp.din.di_nlink -= 1
                dp.flags |= IN.CHANGE
                ip.din.di_nlink = 0
                raise
            ip.size = DIRBLKSIZ
            bp.data[:DIRBLKSIZ] = chunk
            fs.cache.bwrite(bp)
            update(ip, wait=True)
            try:
                dir_enter(dp, nd.name, ip.number, DT_DIR, cred)
            except OSError:
                dp.din.di_nlink -= 1
                dp.flags |= IN.CHANGE
                ip.din.di_nlink = 0
                raise
            update(dp, wait=False)
        finally:
            iput(ip)
    finally:
        iput(dp)


def remove(fs, path, start=None) -> None:
    nd = namei(fs, path, DELETE, follow=False, start=start)
    dp, ip = nd.dp, nd.ip
    try:
        if ip.isdir:
            raise fserr(errno.EPERM, "unlink of a directory")
        if ip.din.di_flags & (IMMUTABLE | APPEND):
            raise fserr(errno.EPERM)
        dir_remove(dp, nd.name)
        ip.din.di_nlink -= 1
        ip.flags |= IN.CHANGE
        update(dp, wait=False)
    finally:
        nd.release()


def rmdir(fs, path, start=None) -> None:
    nd = namei(fs, path, DELETE, follow=False, start=start)
    dp, ip = nd.dp, nd.ip
    try:
        if nd.name in (b".", b".."):
            raise fserr(errno.EINVAL)
        if not ip.isdir:
            raise fserr(errno.ENOTDIR)
        if ip.number == ROOTINO or dp is ip:
            raise fserr(errno.EBUSY)
        if ip.din.di_nlink != 2 or not dir_empty(ip):
            raise fserr(errno.ENOTEMPTY)
        dir_remove(dp, nd.name)
        dp.din.di_nlink -= 1
        dp.flags |= IN.CHANGE
        update(dp, wait=False)
        ip.din.di_nlink = 0
        ip.flags |= IN.CHANGE
        fs.ncache.cache_purge(ip.vnode)
    finally:
        nd.release()


def link(fs, target, path, start=None) -> None:
    src = namei(fs, target, LOOKUP, follow=False, start=start)
    ip = src.ip
    try:
        if ip.isdir:
            raise fserr(errno.EPERM, "hard link to a directory")
        if ip.din.di_nlink >= LINK_MAX:
            raise fserr(errno.EMLINK)
        nd = namei(fs, path, CREATE, follow=False, start=start)
        if nd.ip is not None:
            nd.release()
            raise fserr(errno.EEXIST)
        dp = nd.dp
        try:
            ip.din.di_nlink += 1
            ip.flags |= IN.CHANGE
            fs.trace(("link", ip.number))
            update(ip, wait=True)
            try:
                dir_enter(dp, nd.name, ip.number, iftodt(ip.mode))
            except OSError:
                ip.din.di_nlink -= 1
                ip.flags |= IN.CHANGE
                raise
            update(dp, wait=False)
        finally:
            iput(dp)
    finally:
        src.release()


def symlink(fs, target, path, cred: Cred = ROOTCRED, start=None) -> None:
    target = _as_bytes(target)
    if not target:
        raise fserr(errno.ENOENT, "empty symlink target")
    nd = namei(fs, path, CREATE, follow=False, start=start)
    if nd.ip is not None:
        nd.release()
        raise fserr(errno.EEXIST)
    dp = nd.dp
    try:
        ip = _makeinode(fs, dp, IFLNK | 0o755, cred)
        try:
            ip.din.di_nlink = 1
            ip.flags |= IN.ACCESS | IN.CHANGE | IN.UPDATE
            if len(target) <= fs.sb.fs_maxsymlinklen:
                ip.din.shortlink = target
                ip.size = len(target)
            else:
                try:
                    write(ip, IoCursor.writer(0, target), IO_SYNC, cred)
                except OSError:
                    ip.din.di_nlink = 0
                    raise
            update(ip, wait=True)
            try:
                dir_enter(dp, nd.name, ip.number, DT_LNK, cred)
            except OSError:
                ip.din.di_nlink = 0
                ip.flags |= IN.CHANGE
                raise
            update(dp, wait=False)
        finally:
            iput(ip)
    finally:
        iput(dp)


def readlink(fs, path, start=None) -> bytes:
    nd = namei(fs, path, LOOKUP, follow=False, start=start)
    try:
        return _readlink_ip(nd.ip)
    finally:
        nd.release()


def _is_ancestor(fs, src: InodeHandle, dst_dir: InodeHandle) -> bool:
    """True if ``src`` is ``dst_dir`` or one of its ancestors."""
    ip = dst_dir
    fs.vnodes.vref(ip.vnode)
    try:
        while True:
            if ip.number == src.number:
                return True
            if ip.number == ROOTINO:
                return False
            found = dir_search(ip, b"..")
            if found is None:
                raise fserr(errno.ENOTDIR, "directory without ..")
            parent = iget(fs, found[0])
            iput(ip)
            ip = parent
    finally:
        iput(ip)


def rename(fs, from_path, to_path, start=None) -> None:
    src = namei(fs, from_path, DELETE, follow=False, start=start)
    fdp, fip = src.dp, src.ip
    try:
        if src.name in (b".", b".."):
            raise fserr(errno.EINVAL)
        tgt = namei(fs, to_path, RENAME, follow=False, start=start)
        tdp, tip = tgt.dp, tgt.ip
        try:
            if fip.isdir and _is_ancestor(fs, fip, tdp):
                raise fserr(errno.EINVAL, "rename into own subtree")
            if tip is not None and tip.number == fip.number:
                return
            if tip is not None:
                if tip.isdir != fip.isdir:
                    raise fserr(errno.EISDIR if tip.isdir else errno.ENOTDIR)
                if tip.isdir and (tip.din.di_nlink != 2 or not dir_empty(tip)):
                    raise fserr(errno.ENOTEMPTY)
            newparent = fdp.number != tdp.number
            if fip.isdir and newparent and tdp.din.di_nlink >= LINK_MAX:
                raise fserr(errno.EMLINK)
            # an extra link keeps the inode alive across the two entries
            fip.din.di_nlink += 1
            fip.flags |= IN.CHANGE | IN.RENAME
            fs.trace(("link", fip.number))
            update(fip, wait=True)
            if tip is None:
                if fip.isdir and newparent:
                    tdp.din.di_nlink += 1
                    tdp.flags |= IN.CHANGE
                    update(tdp, wait=True)
                dir_search(tdp, tgt.name)
                dir_enter(tdp, tgt.name, fip.number, iftodt(fip.mode))
            else:
                dir_rewrite(tdp, tgt.name, fip.number, iftodt(fip.mode))
                if tip.isdir:
                    # the target's ".." link to tdp goes away with it
                    if not newparent:
                        tdp.din.di_nlink -= 1
                    tip.din.di_nlink = 0
                else:
                    tip.din.di_nlink -= 1
                tip.flags |= IN.CHANGE
                fs.ncache.cache_purge(tip.vnode)
                tdp.flags |= IN.CHANGE
            update(tdp, wait=False)
            # drop the source name
            dir_remove(fdp, src.name)
            fip.din.di_nlink -= 1
            fip.flags |= IN.CHANGE
            if fip.isdir and newparent:
                dir_rewrite(fip, b"..", tdp.number, DT_DIR)
                fdp.din.di_nlink -= 1
                fdp.flags |= IN.CHANGE
            update(fdp, wait=False)
            update(fip, wait=False)
            fs.ncache.cache_purge(fip.vnode)
        finally:
            tgt.release()
    finally:
        src.release()


def lookup(fs, path, follow: bool = True, start=None) -> InodeHandle:
    nd = namei(fs, path, LOOKUP, follow=follow, start=start)
    return nd.ip


def listdir(fs, path, start=None) -> list[tuple[bytes, int, int]]:
    ip = lookup(fs, path, start=start)
    try:
        return [(e.name, e.ino, e.type) for e in dir_entries(ip) if e.ino]
    finally:
        iput(ip)


__all__ = [
    "DIRBLKSIZ", "MAXNAMLEN", "MAXSYMLINKS", "LOOKUP", "CREATE", "DELETE", "RENAME",
    "DT_DIR", "DT_REG", "DT_LNK", "DirEntry", "dirsiz", "pack_entry", "parse_chunk",
    "dir_entries", "dir_search", "dir_enter", "dir_remove", "dir_rewrite", "dir_empty",
    "NameCache", "NEGATIVE", "VnodeLite", "VnodeTable", "desired_vnodes", "DESIREDVNODES",
    "namei", "NameiResult", "create", "mkdir", "remove", "rmdir", "link", "symlink",
    "readlink", "rename", "lookup", "listdir", "MAXSYMLINKLEN", "truncate",
]
