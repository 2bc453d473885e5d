"""In-core inodes: cache lifecycle, block mapping, file read/write and truncate."""

from __future__ import annotations

import errno
import os
import struct
from dataclasses import dataclass
from enum import IntFlag

from . import alloc
from .bufcache import Buf
from .devimg import Panic
from .layout import (IFDIR, IFLNK, IFMT, IFREG, NDADDR, NIADDR, Dinode, DINODE_SIZE,
                     MAXSYMLINKLEN)

DEV = "dev"
HOLE = -1

UF_NODUMP = 0x00000001
UF_IMMUTABLE = 0x00000002
UF_APPEND = 0x00000004
UF_OPAQUE = 0x00000008
SF_ARCHIVED = 0x00010000
SF_IMMUTABLE = 0x00020000
SF_APPEND = 0x00040000
UF_SETTABLE = 0x0000FFFF
SF_SETTABLE = 0xFFFF0000
IMMUTABLE = UF_IMMUTABLE | SF_IMMUTABLE
APPEND = UF_APPEND | SF_APPEND

IO_UNIT = 0x01
IO_APPEND = 0x02
IO_SYNC = 0x04

_PTR = struct.Struct(">i")


class IN(IntFlag):
    ACCESS = 0x0001
    CHANGE = 0x0002
    UPDATE = 0x0004
    MODIFIED = 0x0008
    ACCESSED = 0x0010
    RENAME = 0x0020


IN_TIMES = IN.ACCESS | IN.CHANGE | IN.UPDATE | IN.MODIFIED


def fserr(code: int, what: str = "") -> OSError:
    msg = os.strerror(code)
    return OSError(code, f"{msg}: {what}" if what else msg)


@dataclass(frozen=True)
class Cred:
    uid: int = 0
    gid: int = 0
    privileged: bool = True


ROOTCRED = Cred()


class InodeHandle:
    """The in-core copy of one inode; at most one exists per inode number."""

    def __init__(self, fs, number: int, din: Dinode, vnode=None):
        self.fs = fs
        self.number = number
        self.din = din
        self.flags = IN(0)
        self.vnode = vnode
        # directory search side effects
        self.i_count = 0
        self.i_endoff = 0
        self.i_diroff = 0
        self.i_offset = 0
        self.i_reclen = 0
        self.dquot = [None, None]

    @property
    def size(self) -> int:
        return self.din.di_size

    @size.setter
    def size(self, v: int) -> None:
        self.din.di_size = v

    @property
    def mode(self) -> int:
        return self.din.di_mode

    @property
    def ifmt(self) -> int:
        return self.din.di_mode & IFMT

    @property
    def isdir(self) -> bool:
        return self.ifmt == IFDIR

    @property
    def usecount(self) -> int:
        return self.vnode.usecount if self.vnode is not None else 0

    def __repr__(self) -> str:
        return f"<inode {self.number} mode={self.din.di_mode:o} size={self.din.di_size}>"


class IoCursor:
    """A uio: offset and residual count over a list of memory segments."""

    READ, WRITE = 0, 1

    def __init__(self, offset: int, segments, direction: int):
        self.offset = offset
        self.segments = [memoryview(s).cast("B") for s in segments]
        self.direction = direction
        self.resid = sum(len(s) for s in self.segments)
        self._seg = 0
        self._pos = 0

    @classmethod
    def reader(cls, offset: int, n: int) -> "IoCursor":
        return cls(offset, [bytearray(n)], cls.READ)

    @classmethod
    def writer(cls, offset: int, data: bytes) -> "IoCursor":
        return cls(offset, [data], cls.WRITE)

    def data(self) -> bytes:
        """Bytes moved so far, for a single-segment read cursor."""
        done = sum(len(s) for s in self.segments) - self.resid
        return bytes(self.segments[0][:done]) if len(self.segments) == 1 else b"".join(
            bytes(s) for s in self.segments)[:done]


def uiomove(buf, n: int, uio: IoCursor) -> None:
    """Move ``n`` bytes between ``buf`` and the cursor's segments."""
    buf = memoryview(buf)
    done = 0
    while n > 0 and uio.resid > 0:
        seg = uio.segments[uio._seg]
        cnt = min(n, len(seg) - uio._pos)
        if cnt == 0:
            uio._seg += 1
            uio._pos = 0
            continue
        if uio.direction == IoCursor.READ:
            seg[uio._pos:uio._pos + cnt] = buf[done:done + cnt]
        else:
            buf[done:done + cnt] = seg[uio._pos:uio._pos + cnt]
        uio._pos += cnt
        uio.offset += cnt
        uio.resid -= cnt
        done += cnt
        n -= cnt


# inode cache

def iget(fs, ino: int) -> InodeHandle:
    sb = fs.sb
    if not 2 <= ino < sb.fs_ipg * sb.fs_ncg:
        raise fserr(errno.EINVAL, f"inode {ino} out of range")
    ip = fs.ihash.get(ino)
    if ip is not None:
        fs.vnodes.vget(ip.vnode)
        return ip
    vp = fs.vnodes.getnewvnode()
    # the recycle above may have filled the slot through a reentrant iget
    ip = fs.ihash.get(ino)
    if ip is not None:
        fs.vnodes.release_unused(vp)
        fs.vnodes.vget(ip.vnode)
        return ip
    bp = fs.cache.bread(DEV, sb.ino_to_fsba(ino), sb.fs_bsize)
    din = Dinode.parse(bp.data, sb.ino_to_fsbo(ino) * DINODE_SIZE)
    fs.cache.brelse(bp)
    ip = InodeHandle(fs, ino, din, vp)
    vp.attach(ip)
    fs.ihash[ino] = ip
    fs.quota.getinoquota(ip)
    return ip


def iput(ip: InodeHandle) -> None:
    fs = ip.fs
    vp = ip.vnode
    if vp is None or vp.usecount <= 0:
        raise Panic(f"iput: {ip!r} over-released")
    if vp.usecount == 1:
        inactive(ip)
    fs.vnodes.vrele(vp)


def inactive(ip: InodeHandle) -> None:
    fs = ip.fs
    if ip.din.di_mode == 0:
        return
    if ip.din.di_nlink <= 0 and not fs.readonly:
        # last reference to an unlinked file
        truncate(ip, 0, sync=True)
        fs.quota.chkiq(ip, -1, True)
        mode = ip.din.di_mode
        ip.din.di_mode = 0
        ip.flags |= IN.CHANGE | IN.UPDATE
        update(ip, wait=True)
        alloc.freefile(fs, ip.number, mode)
        fs.vnodes.vgone(ip.vnode)
        return
    if ip.flags & IN_TIMES:
        update(ip, wait=False)


def reclaim(ip: InodeHandle) -> None:
    """Detach an unreferenced inode from its vnode, flushing state first."""
    fs = ip.fs
    if ip.flags & IN_TIMES and ip.din.di_mode != 0:
        update(ip, wait=False)
    fs.cache.vinvalbuf(ip.number, save=True)
    if fs.ihash.get(ip.number) is ip:
        del fs.ihash[ip.number]
    fs.quota.dqrele_inode(ip)


def update(ip: InodeHandle, wait: bool = False, access_t=None, modify_t=None) -> None:
    fs = ip.fs
    if fs.readonly:
        return
    if not ip.flags & IN_TIMES:
        return
    sec, nsec = fs.clock_pair()
    d = ip.din
    if ip.flags & IN.ACCESS:
        d.di_atime, d.di_atimensec = access_t if access_t is not None else (sec, nsec)
    if ip.flags & IN.UPDATE:
        d.di_mtime, d.di_mtimensec = modify_t if modify_t is not None else (sec, nsec)
    if ip.flags & IN.CHANGE:
        d.di_ctime, d.di_ctimensec = sec, nsec
    ip.flags &= ~IN_TIMES
    sb = fs.sb
    bp = fs.cache.bread(DEV, sb.ino_to_fsba(ip.number), sb.fs_bsize)
    off = sb.ino_to_fsbo(ip.number) * DINODE_SIZE
    bp.data[off:off + DINODE_SIZE] = d.serialize()
    fs.trace(("iupdate", ip.number))
    if wait:
        fs.cache.bwrite(bp)
    else:
        fs.cache.bdwrite(bp)


# block mapping

def indir_path(fs, lbn: int) -> tuple[int, list[int]]:
    """Indirection level (0..2) and per-level slot offsets for a logical block."""
    nindir = fs.sb.fs_nindir
    rel = lbn - NDADDR
    span = nindir
    for level in range(NIADDR):
        if rel < span:
            break
        rel -= span
        span *= nindir
    else:
        raise fserr(errno.EFBIG, f"block {lbn} beyond triple indirect")
    offs = []
    for lv in range(level, -1, -1):
        unit = nindir ** lv
        offs.append(rel // unit)
        rel %= unit
    return level, offs


def _ptr(bp: Buf, i: int) -> int:
    return _PTR.unpack_from(bp.data, i * 4)[0]


def _setptr(bp: Buf, i: int, v: int) -> None:
    _PTR.pack_into(bp.data, i * 4, v)


def bmap(ip: InodeHandle, lbn: int) -> int:
    """Physical frag address of a logical block, or HOLE."""
    if lbn < 0:
        raise fserr(errno.EINVAL, f"negative block {lbn}")
    if lbn < NDADDR:
        return ip.din.di_db[lbn] or HOLE
    fs = ip.fs
    level, offs = indir_path(fs, lbn)
    nb = ip.din.di_ib[level]
    for off in offs:
        if nb == 0:
            return HOLE
        bp = fs.cache.bread(DEV, nb, fs.sb.fs_bsize)
        nb = _ptr(bp, off)
        fs.cache.brelse(bp)
    return nb or HOLE


def chain_blocks(fs, din: Dinode) -> list[tuple[int, int]]:
    """Every (frag address, size) reachable from a dinode, via the cache."""
    sb = fs.sb
    if din.di_mode & IFMT == IFLNK and din.di_size <= sb.fs_maxsymlinklen and din.di_blocks == 0:
        return []
    out = []
    for lbn in range(NDADDR):
        if din.di_db[lbn]:
            out.append((din.di_db[lbn], sb.blksize(din.di_size, lbn)))

    def walk(addr: int, level: int):
        out.append((addr, sb.fs_bsize))
        bp = fs.cache.bread(DEV, addr, sb.fs_bsize)
        ptrs = struct.unpack(f">{sb.fs_nindir}i", bytes(bp.data[: sb.fs_bsize]))
        fs.cache.brelse(bp)
        for p in ptrs:
            if p:
                if level:
                    walk(p, level - 1)
                else:
                    out.append((p, sb.fs_bsize))

    for level in range(NIADDR):
        if din.di_ib[level]:
            walk(din.di_ib[level], level)
    return out


# allocation

def _realloc(ip: InodeHandle, lbn: int, bpref: int, osize: int, nsize: int, cred: Cred) -> Buf:
    fs = ip.fs
    cache = fs.cache
    bprev = ip.din.di_db[lbn]
    bp = cache.bread(ip.number, lbn, osize)
    try:
        bno, request = alloc.realloccg(fs, ip, lbn, bprev, bpref, osize, nsize, cred.privileged)
    except Exception:
        cache.brelse(bp)
        raise
    cache.allocbuf(bp, nsize)
    bp.data[osize:nsize] = bytes(nsize - osize)
    bp.blkno = bno
    if bno != bprev:
        alloc.realloc_finish(fs, ip, bprev, bno, osize, nsize, request)
    ip.din.di_db[lbn] = bno
    ip.flags |= IN.CHANGE | IN.UPDATE
    return bp


def _newblk(ip: InodeHandle, file, lbn: int, nb: int, size: int, clrbuf: bool) -> Buf:
    bp = ip.fs.cache.getblk(file, lbn, size)
    bp.blkno = nb
    if clrbuf:
        bp.clrbuf()
    return bp


def extend_last_fragment(ip: InodeHandle, lbn: int, sync: bool, cred: Cred) -> None:
    """Grow the file's trailing fragment to a full block before ``lbn`` is used."""
    fs = ip.fs
    sb = fs.sb
    nb = sb.lblkno(ip.size)
    if nb < NDADDR and nb < lbn and ip.din.di_db[nb]:
        osize = sb.blksize(ip.size, nb)
        if 0 < osize < sb.fs_bsize:
            pref = alloc.blkpref(fs, ip, nb, nb, ip.din.di_db)
            bp = _realloc(ip, nb, pref, osize, sb.fs_bsize, cred)
            ip.size = sb.lblktosize(nb + 1)
            if sync:
                fs.cache.bwrite(bp)
            else:
                fs.cache.bawrite(bp)


def balloc(ip: InodeHandle, offset: int, size: int, sync: bool = False,
           clrbuf: bool = True, cred: Cred = ROOTCRED) -> Buf:
    """Make sure the block holding [offset, offset+size) is allocated; return it busy."""
    fs = ip.fs
    sb = fs.sb
    cache = fs.cache
    lbn = sb.lblkno(offset)
    size = sb.blkoff(offset) + size
    if size > sb.fs_bsize:
        raise Panic("ffs_balloc: blk too big")
    extend_last_fragment(ip, lbn, sync, cred)

    if lbn < NDADDR:
        nb = ip.din.di_db[lbn]
        if nb and ip.size >= sb.lblktosize(lbn + 1):
            bp = cache.bread(ip.number, lbn, sb.fs_bsize)
            bp.blkno = nb
            return bp
        if nb:
            osize = sb.fragroundup(sb.blkoff(ip.size))
            nsize = sb.fragroundup(size)
            if nsize <= osize:
                bp = cache.bread(ip.number, lbn, osize)
                bp.blkno = nb
                return bp
            return _realloc(ip, lbn, alloc.blkpref(fs, ip, lbn, lbn, ip.din.di_db),
                            osize, nsize, cred)
        if ip.size < sb.lblktosize(lbn + 1):
            nsize = sb.fragroundup(size)
            if sb.lblktosize(lbn) < ip.size:
                # a trailing hole already spans part of this block
                nsize = max(nsize, sb.blksize(ip.size, lbn))
        else:
            nsize = sb.fs_bsize
        pref = alloc.blkpref(fs, ip, lbn, lbn, ip.din.di_db)
        newb = alloc.alloc(fs, ip, lbn, pref, nsize, cred.privileged)
        bp = _newblk(ip, ip.number, lbn, newb, nsize, clrbuf)
        ip.din.di_db[lbn] = newb
        ip.flags |= IN.CHANGE | IN.UPDATE
        return bp

    level, offs = indir_path(fs, lbn)
    allocated: list[int] = []
    undo = []
    try:
        nb = ip.din.di_ib[level]
        pref = 0
        if nb == 0:
            pref = alloc.blkpref(fs, ip, lbn, 0, None)
            nb = alloc.alloc(fs, ip, lbn, pref, sb.fs_bsize, cred.privileged)
            allocated.append(nb)
            ibp = _newblk(ip, DEV, nb, nb, sb.fs_bsize, True)
            # indirect blocks must never point at garbage
            cache.bwrite(ibp)
            ip.din.di_ib[level] = nb
            undo.append(lambda: ip.din.di_ib.__setitem__(level, 0))
            ip.flags |= IN.CHANGE | IN.UPDATE
        for i, off in enumerate(offs):
            bp = cache.bread(DEV, nb, sb.fs_bsize)
            child = _ptr(bp, off)
            if i == len(offs) - 1:
                break
            if child:
                cache.brelse(bp)
                nb = child
                continue
            if pref == 0:
                pref = alloc.blkpref(fs, ip, lbn, 0, None)
            try:
                child = alloc.alloc(fs, ip, lbn, pref, sb.fs_bsize, cred.privileged)
            except Exception:
                cache.brelse(bp)
                raise
            allocated.append(child)
            ibp = _newblk(ip, DEV, child, child, sb.fs_bsize, True)
            cache.bwrite(ibp)
            _setptr(bp, off, child)
            undo.append(_unset_ptr(fs, nb, off))
            if sync:
                cache.bwrite(bp)
            else:
                cache.bdwrite(bp)
            nb = child
        off = offs[-1]
        if child == 0:
            bap = list(struct.unpack(f">{sb.fs_nindir}i", bytes(bp.data[: sb.fs_bsize])))
            pref = alloc.blkpref(fs, ip, lbn, off, bap)
            try:
                child = alloc.alloc(fs, ip, lbn, pref, sb.fs_bsize, cred.privileged)
            except Exception:
                cache.brelse(bp)
                raise
            allocated.append(child)
            nbp = _newblk(ip, ip.number, lbn, child, sb.fs_bsize, clrbuf)
            _setptr(bp, off, child)
            if sync:
                cache.bwrite(bp)
            else:
                cache.bdwrite(bp)
            return nbp
        cache.brelse(bp)
    except OSError:
        for fn in reversed(undo):
            fn()
        for b in allocated:
            cache.invalidate(DEV, b)
            alloc.blkfree(fs, ip, b, sb.fs_bsize)
            ip.din.di_blocks -= sb.fs_frag
            fs.quota.chkdq(ip, -sb.fs_frag, True)
        raise
    if clrbuf:
        nbp = cache.bread(ip.number, lbn, sb.fs_bsize)
    else:
        nbp = cache.getblk(ip.number, lbn, sb.fs_bsize)
    nbp.blkno = child
    return nbp


def _unset_ptr(fs, addr: int, off: int):
    def undo():
        bp = fs.cache.bread(DEV, addr, fs.sb.fs_bsize)
        _setptr(bp, off, 0)
        fs.cache.bwrite(bp)
    return undo


# data path

def read(ip: InodeHandle, uio: IoCursor, noatime: bool = False) -> int:
    fs = ip.fs
    sb = fs.sb
    if uio.direction != IoCursor.READ:
        raise Panic("ffs_read: mode")
    if uio.offset < 0:
        raise fserr(errno.EINVAL)
    if uio.offset > sb.fs_maxfilesize:
        raise fserr(errno.EFBIG)
    if ip.ifmt == IFLNK and ip.size <= sb.fs_maxsymlinklen and ip.din.di_blocks == 0:
        raise Panic("ffs_read: short symlink")
    moved = 0
    cache = fs.cache
    while uio.resid > 0:
        bytesinfile = ip.size - uio.offset
        if bytesinfile <= 0:
            break
        lbn = sb.lblkno(uio.offset)
        nextlbn = lbn + 1
        size = sb.blksize(ip.size, lbn)
        blkoffset = sb.blkoff(uio.offset)
        xfersize = min(sb.fs_bsize - blkoffset, uio.resid, bytesinfile)
        if sb.lblktosize(nextlbn) >= ip.size:
            bp = cache.bread(ip.number, lbn, size)
        else:
            nextsize = sb.blksize(ip.size, nextlbn)
            bp = cache.breadn(ip.number, lbn, size, [nextlbn], [nextsize])
        avail = size - bp.resid
        if avail < xfersize:
            if avail == 0:
                cache.brelse(bp)
                break
            xfersize = avail
        uiomove(memoryview(bp.data)[blkoffset:blkoffset + xfersize], xfersize, uio)
        moved += xfersize
        cache.brelse(bp)
    if not noatime:
        ip.flags |= IN.ACCESS
    return moved


def write(ip: InodeHandle, uio: IoCursor, ioflag: int = 0, cred: Cred = ROOTCRED) -> int:
    fs = ip.fs
    sb = fs.sb
    cache = fs.cache
    if uio.direction != IoCursor.WRITE:
        raise Panic("ffs_write: mode")
    if fs.readonly:
        raise fserr(errno.EROFS)
    if ip.din.di_flags & IMMUTABLE:
        raise fserr(errno.EPERM, "immutable file")
    if ioflag & IO_APPEND:
        uio.offset = ip.size
    if ip.din.di_flags & APPEND and uio.offset != ip.size:
        raise fserr(errno.EPERM, "append-only file")
    if ip.isdir and not ioflag & IO_SYNC:
        raise Panic("ffs_write: nonsync dir write")
    if uio.offset < 0:
        raise fserr(errno.EINVAL)
    if uio.offset + uio.resid > sb.fs_maxfilesize:
        raise fserr(errno.EFBIG)
    if uio.resid == 0:
        return 0
    osize = ip.size
    oresid = uio.resid
    ooffset = uio.offset
    sync = bool(ioflag & IO_SYNC)
    try:
        while uio.resid > 0:
            lbn = sb.lblkno(uio.offset)
            blkoffset = sb.blkoff(uio.offset)
            xfersize = min(sb.fs_bsize - blkoffset, uio.resid)
            bp = balloc(ip, uio.offset, xfersize, sync=sync,
                        clrbuf=sb.fs_bsize > xfersize, cred=cred)
            if uio.offset + xfersize > ip.size:
                ip.size = uio.offset + xfersize
            size = sb.blksize(ip.size, lbn) - bp.resid
            if size < xfersize:
                xfersize = size
            uiomove(memoryview(bp.data)[blkoffset:blkoffset + xfersize], xfersize, uio)
            if sync:
                cache.bwrite(bp)
            elif xfersize + blkoffset == sb.fs_bsize:
                cache.bawrite(bp)
            else:
                cache.bdwrite(bp)
            ip.flags |= IN.CHANGE | IN.UPDATE
    except OSError:
        truncate(ip, osize, sync=sync)
        uio.offset = ooffset
        uio.resid = oresid
        uio._seg = uio._pos = 0
        raise
    if sync:
        update(ip, wait=True)
    return oresid - uio.resid


# truncate

def truncate(ip: InodeHandle, length: int, sync: bool = False, cred: Cred = ROOTCRED) -> None:
    fs = ip.fs
    sb = fs.sb
    cache = fs.cache
    if length < 0:
        raise fserr(errno.EINVAL)
    if ip.ifmt == IFLNK and ip.size <= sb.fs_maxsymlinklen and ip.din.di_blocks == 0:
        if length != 0:
            raise Panic("ffs_truncate: partial truncate of symlink")
        ip.din.shortlink = b""
        ip.size = 0
        ip.flags |= IN.CHANGE | IN.UPDATE
        update(ip, wait=True)
        return
    if ip.size == length:
        ip.flags |= IN.CHANGE | IN.UPDATE
        update(ip, wait=False)
        return
    osize = ip.size
    if length > osize:
        if length > sb.fs_maxfilesize:
            raise fserr(errno.EFBIG)
        # the old trailing fragment must become a full block, or grow in
        # place when the new end falls in the same block; the rest of the
        # new tail stays a hole
        last = sb.lblkno(length - 1)
        extend_last_fragment(ip, last, sync, cred)
        if last < NDADDR and ip.din.di_db[last] and last == sb.lblkno(ip.size - 1):
            osz = sb.blksize(ip.size, last)
            nsz = sb.fragroundup(sb.blkoff(length - 1) + 1)
            if osz < nsz:
                pref = alloc.blkpref(fs, ip, last, last, ip.din.di_db)
                bp = _realloc(ip, last, pref, osz, nsz, cred)
                if sync:
                    cache.bwrite(bp)
                else:
                    cache.bawrite(bp)
        ip.size = length
        ip.flags |= IN.CHANGE | IN.UPDATE
        update(ip, wait=True)
        return

    # zero the tail of a surviving partial block so a later extension reads zeros
    offset = sb.blkoff(length)
    if offset:
        lbn = sb.lblkno(length)
        if bmap(ip, lbn) != HOLE:
            bp = cache.bread(ip.number, lbn, sb.blksize(osize, lbn))
            newsize = sb.blksize(length, lbn)
            bp.data[offset:bp.bcount] = bytes(bp.bcount - offset)
            cache.allocbuf(bp, newsize)
            if sync:
                cache.bwrite(bp)
            else:
                cache.bdwrite(bp)

    nindir = sb.fs_nindir
    lastblock = sb.lblkno(length + sb.fs_bsize - 1) - 1
    lastiblock = [lastblock - NDADDR]
    lastiblock.append(lastiblock[0] - nindir)
    lastiblock.append(lastiblock[1] - nindir * nindir)
    oldblks = list(ip.din.di_db)
    oldiblks = list(ip.din.di_ib)
    for level in range(NIADDR - 1, -1, -1):
        if lastiblock[level] < 0:
            ip.din.di_ib[level] = 0
            lastiblock[level] = -1
    for i in range(NDADDR - 1, lastblock, -1):
        ip.din.di_db[i] = 0
    ip.size = length
    ip.flags |= IN.CHANGE | IN.UPDATE
    fs.trace(("itrunc", ip.number))
    # the inode no longer points at the blocks before any of them is freed
    update(ip, wait=True)
    ip.din.di_db = oldblks
    ip.din.di_ib = oldiblks
    ip.size = osize
    cache.invalbuf_from(ip.number, lastblock + 1)

    released = 0
    done = False
    for level in range(NIADDR - 1, -1, -1):
        bn = ip.din.di_ib[level]
        if bn:
            released += _indirtrunc(ip, bn, lastiblock[level], level, sync)
            if lastiblock[level] < 0:
                ip.din.di_ib[level] = 0
                cache.invalidate(DEV, bn)
                alloc.blkfree(fs, ip, bn, sb.fs_bsize)
                released += sb.fs_frag
        if lastiblock[level] >= 0:
            done = True
            break
    if not done:
        for i in range(NDADDR - 1, lastblock, -1):
            bn = ip.din.di_db[i]
            if bn == 0:
                continue
            ip.din.di_db[i] = 0
            bsize = sb.blksize(ip.size, i)
            alloc.blkfree(fs, ip, bn, bsize)
            released += sb.numfrags(bsize)
        if lastblock >= 0:
            bn = ip.din.di_db[lastblock]
            if bn:
                oldspace = sb.blksize(ip.size, lastblock)
                ip.size = length
                newspace = sb.blksize(ip.size, lastblock)
                if newspace == 0:
                    raise Panic("itrunc: newspace")
                if oldspace > newspace:
                    alloc.blkfree(fs, ip, bn + sb.numfrags(newspace), oldspace - newspace)
                    released += sb.numfrags(oldspace - newspace)
    ip.size = length
    ip.din.di_blocks -= released
    if ip.din.di_blocks < 0:
        raise Panic(f"itrunc: negative di_blocks on {ip!r}")
    fs.quota.chkdq(ip, -released, True)
    ip.flags |= IN.CHANGE
    fs.trace(("itrunc_end", ip.number))


def _indirtrunc(ip: InodeHandle, addr: int, lastbn: int, level: int, sync: bool) -> int:
    """Free everything under indirect block ``addr`` past entry ``lastbn``."""
    fs = ip.fs
    sb = fs.sb
    cache = fs.cache
    nindir = sb.fs_nindir
    factor = nindir ** level
    last = lastbn // factor if lastbn > 0 else lastbn
    bp = cache.bread(DEV, addr, sb.fs_bsize)
    bap = list(struct.unpack(f">{nindir}i", bytes(bp.data[: sb.fs_bsize])))
    if last >= 0:
        zeros = bytes(4 * (nindir - (last + 1)))
        bp.data[4 * (last + 1):4 * nindir] = zeros
        # on disk first, then free the children
        cache.bwrite(bp)
    else:
        cache.brelse(bp)
    released = 0
    for i in range(nindir - 1, last, -1):
        nb = bap[i]
        if nb == 0:
            continue
        if level > 0:
            released += _indirtrunc(ip, nb, -1, level - 1, sync)
        cache.invalidate(DEV, nb)
        alloc.blkfree(fs, ip, nb, sb.fs_bsize)
        released += sb.fs_frag
    if level > 0 and lastbn >= 0:
        nb = bap[last]
        if nb:
            released += _indirtrunc(ip, nb, lastbn % factor, level - 1, sync)
    return released


# symlinks

def readlink(ip: InodeHandle) -> bytes:
    fs = ip.fs
    if ip.ifmt != IFLNK:
        raise fserr(errno.EINVAL, "not a symlink")
    if ip.size <= fs.sb.fs_maxsymlinklen and ip.din.di_blocks == 0:
        return ip.din.shortlink
    uio = IoCursor.reader(0, ip.size)
    read(ip, uio, noatime=True)
    return uio.data()


def is_short_symlink(fs, din: Dinode) -> bool:
    return (din.di_mode & IFMT == IFLNK and din.di_size <= fs.sb.fs_maxsymlinklen
            and din.di_blocks == 0)


__all__ = [
    "DEV", "HOLE", "IN", "IO_APPEND", "IO_SYNC", "IO_UNIT", "Cred", "ROOTCRED",
    "InodeHandle", "IoCursor", "uiomove", "iget", "iput", "update", "bmap", "balloc",
    "read", "write", "truncate", "readlink", "indir_path", "chain_blocks", "fserr",
    "IFDIR", "IFREG", "IFLNK", "MAXSYMLINKLEN",
]
