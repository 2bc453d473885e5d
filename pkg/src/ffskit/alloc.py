"""Block, fragment and inode allocation for FFS cylinder groups.

The algorithms follow the classical kernel routines closely.  They work on a
filesystem object that exposes:

    sb            the Superblock
    cs            per-group CgSummary list (the in-core csum area)
    getcg(c)      -> (buf, CylGroup), buffer busy
    putcg(bp, cg) serialize and delayed-write the group
    relcg(bp)     release the group buffer unmodified
    quota         optional quota manager with chkdq()
    trace(ev)     ordering-trace hook
    now()         clock in seconds

Inodes passed in only need ``number`` and ``din`` (a Dinode).
"""

from __future__ import annotations

import errno
import logging
import os

from .devimg import Panic
from .layout import IFDIR, IFMT, MAXFRAG, CylGroup, FS_OPTSPACE, FS_OPTTIME, NDADDR, Superblock

log = logging.getLogger(__name__)

NBBY = 8


def _runs(m: int, nbits: int) -> list[int]:
    """Maximal runs of set bits in the low ``nbits`` of ``m``."""
    runs, n = [], 0
    for i in range(nbits):
        if m >> i & 1:
            n += 1
        elif n:
            runs.append(n)
            n = 0
    if n:
        runs.append(n)
    return runs


def _build_fragtbl8() -> bytes:
    return bytes(sum({1 << (r - 1) for r in _runs(m, 8)}) for m in range(256))


def _build_fragtbl124() -> bytes:
    out = bytearray(256)
    for m in range(256):
        v = 0
        for frag in (1, 2, 4):
            for f in range(0, 8, frag):
                field = (m >> f) & ((1 << frag) - 1)
                for r in _runs(field, frag):
                    v |= 1 << (r - 1 + frag)
        out[m] = v
    return bytes(out)


fragtbl8 = _build_fragtbl8()
fragtbl124 = _build_fragtbl124()
fragtbl = (None, fragtbl124, fragtbl124, None, fragtbl124, None, None, None, fragtbl8)
around = tuple((1 << (n + 2)) - 1 for n in range(MAXFRAG + 1))
inside = tuple(((1 << n) - 1) << 1 for n in range(MAXFRAG + 1))


def blkmap(sb: Superblock, freemap, loc: int) -> int:
    return (freemap[loc // NBBY] >> (loc % NBBY)) & (0xFF >> (NBBY - sb.fs_frag))


def _blockmask(frag: int, h: int) -> tuple[int, int]:
    """(byte index, mask) covering block ``h`` of a free map."""
    if frag == 8:
        return h, 0xFF
    if frag == 4:
        return h >> 1, 0x0F << ((h & 1) << 2)
    if frag == 2:
        return h >> 2, 0x03 << ((h & 3) << 1)
    if frag == 1:
        return h >> 3, 0x01 << (h & 7)
    raise Panic(f"bad fs_frag {frag}")


def isblock(sb: Superblock, freemap, h: int) -> bool:
    i, mask = _blockmask(sb.fs_frag, h)
    return freemap[i] & mask == mask


def clrblock(sb: Superblock, freemap, h: int) -> None:
    i, mask = _blockmask(sb.fs_frag, h)
    freemap[i] &= ~mask & 0xFF


def setblock(sb: Superblock, freemap, h: int) -> None:
    i, mask = _blockmask(sb.fs_frag, h)
    freemap[i] |= mask


def fragacct(sb: Superblock, fragmap: int, fraglist: list[int], cnt: int) -> None:
    """Add ``cnt`` to fraglist[s] for every maximal free run of s < frag in one block."""
    frag = sb.fs_frag
    inblk = fragtbl[frag][fragmap] << 1
    fragmap <<= 1
    for siz in range(1, frag):
        if not inblk & (1 << (siz + (frag % NBBY))):
            continue
        field, subfield = around[siz], inside[siz]
        pos = siz
        while pos <= frag:
            if fragmap & field == subfield:
                fraglist[siz] += cnt
                pos += siz
                field <<= siz
                subfield <<= siz
            field <<= 1
            subfield <<= 1
            pos += 1


def scanc(size: int, buf, start: int, table: bytes, mask: int) -> int:
    """Bytes remaining (counting the hit) when scanning for ``table[b] & mask``."""
    end = start + size
    cp = start
    while cp < end and not table[buf[cp]] & mask:
        cp += 1
    return end - cp


def mapsearch(sb: Superblock, cg: CylGroup, bpref: int, allocsiz: int) -> int:
    """Group-relative frag number starting a free run of exactly ``allocsiz``."""
    frag = sb.fs_frag
    freemap = cg.blkfree
    if bpref:
        start = sb.dtogd(bpref) // NBBY
    else:
        start = cg.cg_frotor // NBBY
    length = (sb.fs_fpg + NBBY - 1) // NBBY - start
    mask = 1 << (allocsiz - 1 + (frag & (NBBY - 1)))
    table = fragtbl[frag]
    loc = scanc(length, freemap, start, table, mask)
    if loc == 0:
        length = start + 1
        start = 0
        loc = scanc(length, freemap, start, table, mask)
        if loc == 0:
            raise Panic("ffs_alloccg: map corrupted")
    bno = (start + length - loc) * NBBY
    cg.cg_frotor = bno
    end = bno + NBBY
    while bno < end:
        blk = blkmap(sb, freemap, bno) << 1
        field, subfield = around[allocsiz], inside[allocsiz]
        for pos in range(frag - allocsiz + 1):
            if blk & field == subfield:
                return bno + pos
            field <<= 1
            subfield <<= 1
        bno += frag
    raise Panic("ffs_alloccg: block not in map")


def cg_recount(sb: Superblock, cg: CylGroup,
               nblocks_frags: int | None = None) -> tuple[int, int, list[int]]:
    """(nbfree, nffree, frsum) rebuilt from the free map."""
    nf = sb.fs_fpg if nblocks_frags is None else nblocks_frags
    nbfree = nffree = 0
    frsum = [0] * MAXFRAG
    for base in range(0, nf, sb.fs_frag):
        if isblock(sb, cg.blkfree, sb.fragstoblks(base)):
            nbfree += 1
            continue
        m = blkmap(sb, cg.blkfree, base)
        nffree += bin(m).count("1")
        fragacct(sb, m, frsum, 1)
    return nbfree, nffree, frsum


def _nospace(fs, ip, msg: str = "file system full"):
    uid = ip.din.di_uid if ip is not None else 0
    mnt = fs.sb.fs_fsmnt.decode(errors="replace") or "-"
    log.warning("uid %d on %s: %s", uid, mnt, msg)
    return OSError(errno.ENOSPC, os.strerror(errno.ENOSPC) + f": {msg}")


def _cs_adjust(fs, c: int, cg: CylGroup, attr: str, delta: int) -> None:
    setattr(cg.cg_cs, attr, getattr(cg.cg_cs, attr) + delta)
    total = fs.sb.fs_cstotal
    setattr(total, attr, getattr(total, attr) + delta)
    setattr(fs.cs[c], attr, getattr(fs.cs[c], attr) + delta)
    fs.sb.fs_fmod = 1


# global policy

def blkpref(fs, ip, lbn: int, indx: int, bap: list[int] | None) -> int:
    sb = fs.sb
    if bap is None or indx % sb.fs_maxbpg == 0 or bap[indx - 1] == 0:
        if lbn < NDADDR + sb.fs_nindir:
            cg = sb.ino_to_cg(ip.number)
            return sb.fs_fpg * cg + sb.fs_frag
        if bap is None or indx == 0 or bap[indx - 1] == 0:
            startcg = sb.ino_to_cg(ip.number) + lbn // sb.fs_maxbpg
        else:
            startcg = sb.dtog(bap[indx - 1]) + 1
        startcg %= sb.fs_ncg
        avgbfree = sb.fs_cstotal.cs_nbfree // sb.fs_ncg
        for cg in list(range(startcg, sb.fs_ncg)) + list(range(0, startcg + 1)):
            if fs.cs[cg].cs_nbfree >= avgbfree:
                sb.fs_cgrotor = cg
                return sb.fs_fpg * cg + sb.fs_frag
        return 0
    # rotdelay is zero, so the next block is always contiguous
    return bap[indx - 1] + sb.fs_frag


def hashalloc(fs, cg: int, pref: int, want, allocator, probes: list | None = None):
    """Cylinder overflow: preferred group, +1,+2,+4... offsets, then groups 2..ncg-1."""
    ncg = fs.sb.fs_ncg

    def attempt(c, p):
        if probes is not None:
            probes.append(c)
        return allocator(fs, c, p, want)

    result = attempt(cg, pref)
    if result:
        return result
    i = 1
    while i < ncg:
        result = attempt((cg + i) % ncg, 0)
        if result:
            return result
        i *= 2
    for c in range(2, ncg):
        result = attempt(c, 0)
        if result:
            return result
    return 0


def alloc(fs, ip, lbn: int, bpref: int, size: int, privileged: bool = False) -> int:
    """Allocate ``size`` bytes (frag multiple) and return the frag address."""
    sb = fs.sb
    if size > sb.fs_bsize or sb.fragoff(size) != 0 or size <= 0:
        raise Panic(f"ffs_alloc: bad size {size}")
    if size == sb.fs_bsize and sb.fs_cstotal.cs_nbfree == 0:
        raise _nospace(fs, ip)
    if not privileged and sb.freespace(sb.fs_minfree) <= 0:
        raise _nospace(fs, ip)
    nfrags = sb.numfrags(size)
    if fs.quota is not None:
        fs.quota.chkdq(ip, nfrags, privileged)
    if bpref >= sb.fs_size:
        bpref = 0
    cg = sb.ino_to_cg(ip.number) if bpref == 0 else sb.dtog(bpref)
    bno = hashalloc(fs, cg, bpref, size, alloccg)
    if bno > 0:
        ip.din.di_blocks += nfrags
        return bno
    if fs.quota is not None:
        fs.quota.chkdq(ip, -nfrags, True)
    raise _nospace(fs, ip)


def realloccg(fs, ip, lbprev: int, bprev: int, bpref: int, osize: int, nsize: int,
              privileged: bool = False) -> tuple[int, int]:
    """Grow the fragment run at ``bprev`` from osize to nsize.

    Returns ``(bno, request)``: the run's (possibly new) address and how many
    bytes were taken from the allocator.  When ``bno != bprev`` the caller
    must copy the data and then call :func:`realloc_finish`.
    """
    sb = fs.sb
    for s in (osize, nsize):
        if s > sb.fs_bsize or sb.fragoff(s) != 0 or s <= 0:
            raise Panic(f"ffs_realloccg: bad size {s}")
    if nsize <= osize:
        raise Panic(f"ffs_realloccg: new size {nsize} not larger than {osize}")
    if not privileged and sb.freespace(sb.fs_minfree) <= 0:
        raise _nospace(fs, ip)
    if bprev == 0:
        raise Panic(f"ffs_realloccg: bad bprev for lbn {lbprev}")
    delta = sb.numfrags(nsize - osize)
    if fs.quota is not None:
        fs.quota.chkdq(ip, delta, privileged)
    cg = sb.dtog(bprev)
    bno = fragextend(fs, cg, bprev, osize, nsize)
    if bno:
        ip.din.di_blocks += delta
        return bno, nsize
    if bpref >= sb.fs_size:
        bpref = 0
    if sb.fs_optim == FS_OPTSPACE:
        request = nsize
        if not (sb.fs_minfree < 5 or
                sb.fs_cstotal.cs_nffree > sb.fs_dsize * sb.fs_minfree // (2 * 100)):
            log.info("%s: optimization changed from SPACE to TIME", sb.fs_fsmnt)
            sb.fs_optim = FS_OPTTIME
    else:
        request = sb.fs_bsize
        if not sb.fs_cstotal.cs_nffree < sb.fs_dsize * (sb.fs_minfree - 2) // 100:
            log.info("%s: optimization changed from TIME to SPACE", sb.fs_fsmnt)
            sb.fs_optim = FS_OPTSPACE
    bno = hashalloc(fs, cg, bpref, request, alloccg)
    if bno > 0:
        return bno, request
    if fs.quota is not None:
        fs.quota.chkdq(ip, -delta, True)
    raise _nospace(fs, ip)


def realloc_finish(fs, ip, bprev: int, bno: int, osize: int, nsize: int, request: int) -> None:
    """After a moved reallocation: free the old run and any unused tail."""
    sb = fs.sb
    blkfree(fs, ip, bprev, osize)
    if nsize < request:
        blkfree(fs, ip, bno + sb.numfrags(nsize), request - nsize)
    ip.din.di_blocks += sb.numfrags(nsize - osize)


def fragextend(fs, cg: int, bprev: int, osize: int, nsize: int) -> int:
    sb = fs.sb
    if fs.cs[cg].cs_nffree < sb.numfrags(nsize - osize):
        return 0
    frags = sb.numfrags(nsize)
    bbase = sb.fragnum(bprev)
    if bbase > sb.fragnum(bprev + frags - 1):
        # would cross a block boundary
        return 0
    bp, cgp = fs.getcg(cg)
    bno = sb.dtogd(bprev)
    ofrags = sb.numfrags(osize)
    for i in range(ofrags, frags):
        if not cgp.isfree(bno + i):
            fs.relcg(bp)
            return 0
    i = frags
    while i < sb.fs_frag - bbase:
        if not cgp.isfree(bno + i):
            break
        i += 1
    cgp.cg_frsum[i - ofrags] -= 1
    if i != frags:
        cgp.cg_frsum[i - frags] += 1
    for i in range(ofrags, frags):
        cgp.clrfree(bno + i)
    _cs_adjust(fs, cg, cgp, "cs_nffree", -(frags - ofrags))
    cgp.cg_time = fs.now()
    fs.putcg(bp, cgp)
    return bprev


# local policy

def alloccg(fs, cg: int, bpref: int, size: int) -> int:
    sb = fs.sb
    if fs.cs[cg].cs_nbfree == 0 and size == sb.fs_bsize:
        return 0
    bp, cgp = fs.getcg(cg)
    if cgp.cg_cs.cs_nbfree == 0 and size == sb.fs_bsize:
        fs.relcg(bp)
        return 0
    cgp.cg_time = fs.now()
    if size == sb.fs_bsize:
        bno = alloccgblk(fs, cg, cgp, bpref)
        fs.putcg(bp, cgp)
        return bno
    frags = sb.numfrags(size)
    allocsiz = frags
    while allocsiz < sb.fs_frag and cgp.cg_frsum[allocsiz] == 0:
        allocsiz += 1
    if allocsiz == sb.fs_frag:
        if cgp.cg_cs.cs_nbfree == 0:
            fs.relcg(bp)
            return 0
        bno = alloccgblk(fs, cg, cgp, bpref)
        rel = sb.dtogd(bno)
        for i in range(frags, sb.fs_frag):
            cgp.setfree(rel + i)
        i = sb.fs_frag - frags
        _cs_adjust(fs, cg, cgp, "cs_nffree", i)
        cgp.cg_frsum[i] += 1
        fs.putcg(bp, cgp)
        return bno
    rel = mapsearch(sb, cgp, bpref, allocsiz)
    for i in range(frags):
        cgp.clrfree(rel + i)
    _cs_adjust(fs, cg, cgp, "cs_nffree", -frags)
    cgp.cg_frsum[allocsiz] -= 1
    if frags != allocsiz:
        cgp.cg_frsum[allocsiz - frags] += 1
    fs.putcg(bp, cgp)
    return cg * sb.fs_fpg + rel


def alloccgblk(fs, cg: int, cgp: CylGroup, bpref: int) -> int:
    sb = fs.sb
    if bpref == 0 or sb.dtog(bpref) != cgp.cg_cgx:
        bpref = cgp.cg_rotor
        bno = None
    else:
        bpref = sb.dtogd(sb.blknum(bpref))
        bno = bpref if isblock(sb, cgp.blkfree, sb.fragstoblks(bpref)) else None
        if bno is not None:
            cgp.cg_rotor = bpref
    # nrpos is 1, so rotational placement never applies
    if bno is None:
        bno = mapsearch(sb, cgp, bpref, sb.fs_frag)
        cgp.cg_rotor = bno
    clrblock(sb, cgp.blkfree, sb.fragstoblks(bno))
    _cs_adjust(fs, cg, cgp, "cs_nbfree", -1)
    return cgp.cg_cgx * sb.fs_fpg + bno


def blkfree(fs, ip, bno: int, size: int) -> None:
    sb = fs.sb
    if (size > sb.fs_bsize or sb.fragoff(size) != 0 or size <= 0
            or sb.fragnum(bno) + sb.numfrags(size) > sb.fs_frag):
        raise Panic(f"blkfree: bad size: bno {bno} size {size}")
    if not 0 < bno < sb.fs_size:
        raise Panic(f"blkfree: bad block {bno}")
    fs.trace(("blkfree", ip.number if ip is not None else 0, bno, size))
    cg = sb.dtog(bno)
    bp, cgp = fs.getcg(cg)
    cgp.cg_time = fs.now()
    rel = sb.dtogd(bno)
    if size == sb.fs_bsize:
        h = sb.fragstoblks(rel)
        if isblock(sb, cgp.blkfree, h) or any(cgp.isfree(rel + i) for i in range(sb.fs_frag)):
            fs.relcg(bp)
            raise Panic(f"blkfree: freeing free block {bno}")
        setblock(sb, cgp.blkfree, h)
        _cs_adjust(fs, cg, cgp, "cs_nbfree", 1)
    else:
        bbase = rel - sb.fragnum(rel)
        blk = blkmap(sb, cgp.blkfree, bbase)
        n = sb.numfrags(size)
        for i in range(n):
            if cgp.isfree(rel + i):
                fs.relcg(bp)
                raise Panic(f"blkfree: freeing free frag {bno + i}")
        fragacct(sb, blk, cgp.cg_frsum, -1)
        for i in range(n):
            cgp.setfree(rel + i)
        _cs_adjust(fs, cg, cgp, "cs_nffree", n)
        blk = blkmap(sb, cgp.blkfree, bbase)
        fragacct(sb, blk, cgp.cg_frsum, 1)
        if isblock(sb, cgp.blkfree, sb.fragstoblks(bbase)):
            _cs_adjust(fs, cg, cgp, "cs_nffree", -sb.fs_frag)
            _cs_adjust(fs, cg, cgp, "cs_nbfree", 1)
    fs.putcg(bp, cgp)


# inodes

def dirpref(fs) -> int:
    """First inode of the group with above-average free inodes and fewest directories."""
    sb = fs.sb
    avgifree = sb.fs_cstotal.cs_nifree // sb.fs_ncg
    best, mindirs = 0, None
    for cg in range(sb.fs_ncg):
        cs = fs.cs[cg]
        if cs.cs_nifree >= avgifree and (mindirs is None or cs.cs_ndir < mindirs):
            best, mindirs = cg, cs.cs_ndir
    return sb.fs_ipg * best


def nodealloccg(fs, cg: int, ipref: int, mode: int) -> int:
    sb = fs.sb
    if fs.cs[cg].cs_nifree == 0:
        return 0
    bp, cgp = fs.getcg(cg)
    if cgp.cg_cs.cs_nifree == 0:
        fs.relcg(bp)
        return 0
    cgp.cg_time = fs.now()
    found = None
    if ipref:
        ipref %= sb.fs_ipg
        if not cgp.isinoused(ipref):
            found = ipref
    if found is None:
        used = cgp.inosused
        start = cgp.cg_irotor // NBBY
        length = (sb.fs_ipg - cgp.cg_irotor + NBBY - 1) // NBBY
        i = next((j for j in range(start, start + length) if used[j] != 0xFF), None)
        if i is None:
            i = next((j for j in range(0, start + 1) if used[j] != 0xFF), None)
            if i is None:
                fs.relcg(bp)
                raise Panic("ffs_nodealloccg: map corrupted")
        m = used[i]
        bit = next(b for b in range(NBBY) if not m & (1 << b))
        found = i * NBBY + bit
        cgp.cg_irotor = found
    cgp.setinoused(found)
    _cs_adjust(fs, cg, cgp, "cs_nifree", -1)
    if mode & IFMT == IFDIR:
        _cs_adjust(fs, cg, cgp, "cs_ndir", 1)
    fs.putcg(bp, cgp)
    return cg * sb.fs_ipg + found


def valloc(fs, pip, mode: int) -> int:
    """Pick and mark an inode number; the caller initializes the inode."""
    sb = fs.sb
    if sb.fs_cstotal.cs_nifree == 0:
        raise _nospace(fs, pip, "out of inodes")
    if mode & IFMT == IFDIR:
        ipref = dirpref(fs)
    else:
        ipref = pip.number if pip is not None else 0
    if ipref >= sb.fs_ncg * sb.fs_ipg:
        ipref = 0
    cg = sb.ino_to_cg(ipref)
    ino = hashalloc(fs, cg, ipref, mode, nodealloccg)
    if ino == 0:
        raise _nospace(fs, pip, "out of inodes")
    fs.trace(("ialloc", ino))
    return ino


def freefile(fs, ino: int, mode: int) -> None:
    sb = fs.sb
    if not 0 <= ino < sb.fs_ipg * sb.fs_ncg:
        raise Panic(f"ifree: range: ino = {ino}")
    fs.trace(("ifree", ino))
    cg = sb.ino_to_cg(ino)
    bp, cgp = fs.getcg(cg)
    cgp.cg_time = fs.now()
    rel = ino % sb.fs_ipg
    if not cgp.isinoused(rel):
        fs.relcg(bp)
        raise Panic(f"ifree: freeing free inode {ino}")
    cgp.clrinoused(rel)
    if rel < cgp.cg_irotor:
        cgp.cg_irotor = rel
    _cs_adjust(fs, cg, cgp, "cs_nifree", 1)
    if mode & IFMT == IFDIR:
        _cs_adjust(fs, cg, cgp, "cs_ndir", -1)
    fs.putcg(bp, cgp)
