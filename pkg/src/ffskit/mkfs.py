"""Build an empty filesystem on a partition."""

from __future__ import annotations

import random
import time
from dataclasses import dataclass

from .alloc import isblock, setblock
from .devimg import (DEV_BSIZE, FS_BSDFFS, DiskImage, LabelError, PartitionDev,
                     default_label, open_image, read_label, write_label)
from .layout import (BBSIZE, DINODE_SIZE, FS_OPTSPACE, FS_OPTTIME, IFDIR, MAXFRAG, ROOTINO,
                     SBOFF, SBSIZE, CgSummary, CylGroup, Dinode, Superblock, cg_size,
                     pack_csum)

DEFAULT_CPG = 32
MINBSIZE = 4096
MAXBSIZE = 65536


class MkfsError(ValueError):
    pass


@dataclass
class MkfsParams:
    bsize: int = 8192
    fsize: int = 1024
    minfree: int = 10
    density: int = 2048
    optim: str = "time"
    cpg: int | None = None
    nsect: int = 32
    ntrak: int = 16
    fsmnt: bytes = b""
    seed: int | None = None


def _pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _roundup(x: int, y: int) -> int:
    return (x + y - 1) // y * y


def _howmany(x: int, y: int) -> int:
    return (x + y - 1) // y


def plan(nsectors: int, p: MkfsParams) -> Superblock:
    """Compute the superblock for a partition of ``nsectors`` sectors."""
    if not _pow2(p.bsize) or not MINBSIZE <= p.bsize <= MAXBSIZE:
        raise MkfsError(f"block size {p.bsize} must be a power of two in {MINBSIZE}..{MAXBSIZE}")
    if not _pow2(p.fsize) or p.fsize < DEV_BSIZE or p.fsize > p.bsize:
        raise MkfsError(f"fragment size {p.fsize} must be a power of two in "
                        f"{DEV_BSIZE}..{p.bsize}")
    if p.bsize // p.fsize > MAXFRAG:
        raise MkfsError(f"block size {p.bsize} / fragment size {p.fsize} exceeds {MAXFRAG}")
    if not 0 <= p.minfree <= 99:
        raise MkfsError(f"minfree {p.minfree} out of range")
    if p.density < DINODE_SIZE:
        raise MkfsError(f"inode density {p.density} too small")
    if p.optim not in ("time", "space"):
        raise MkfsError(f"optimization {p.optim!r} must be time or space")
    if p.ntrak <= 0 or p.nsect <= 0 or not _pow2(p.ntrak):
        raise MkfsError("tracks per cylinder must be a power of two")

    sb = Superblock(fs_bsize=p.bsize, fs_fsize=p.fsize, fs_minfree=p.minfree,
                    fs_optim=FS_OPTTIME if p.optim == "time" else FS_OPTSPACE,
                    fs_nsect=p.nsect, fs_npsect=p.nsect, fs_ntrak=p.ntrak,
                    fs_spc=p.nsect * p.ntrak, fs_fsmnt=p.fsmnt)
    sb.derive()
    frag = sb.fs_frag
    nspf = sb.fs_nspf
    size = nsectors // nspf
    sb.fs_sblkno = _roundup(_howmany(BBSIZE + SBSIZE, p.fsize), frag)
    sb.fs_cblkno = sb.fs_sblkno + _roundup(_howmany(SBSIZE, p.fsize), frag)
    sb.fs_cgoffset = _roundup(_howmany(p.nsect, nspf), frag)
    mask = -1
    i = p.ntrak
    while i > 1:
        mask <<= 1
        i >>= 1
    sb.fs_cgmask = mask
    spread = sb.fs_cgoffset * (~mask)

    fpc = sb.fs_spc // nspf
    if fpc == 0 or fpc % frag and frag % fpc:
        raise MkfsError("cylinder size is not a whole number of blocks")
    cpg = p.cpg or DEFAULT_CPG
    while True:
        fpg = cpg * fpc
        fpg -= fpg % frag
        ipg = _roundup(max(fpg * p.fsize // p.density, sb.fs_inopb), sb.fs_inopb)
        cgsize = cg_size(ipg, fpg)
        iblkno = sb.fs_cblkno + frag * _howmany(cgsize, p.bsize)
        dblkno = iblkno + ipg * DINODE_SIZE // p.fsize
        fits = (cgsize <= p.bsize and fpg <= size
                and dblkno + spread + frag <= fpg)
        if fits or (p.cpg is not None) or cpg == 1:
            break
        cpg //= 2
    if cgsize > p.bsize:
        raise MkfsError(f"cylinder group summary {cgsize} bytes does not fit a {p.bsize} block")
    if fpg > size or dblkno + spread + frag > fpg:
        raise MkfsError(f"partition of {nsectors} sectors is too small")
    ncg = size // fpg
    sb.fs_cpg = cpg
    sb.fs_fpg = fpg
    sb.fs_ipg = ipg
    sb.fs_ncg = ncg
    sb.fs_ncyl = ncg * cpg
    sb.fs_size = ncg * fpg
    sb.fs_iblkno = iblkno
    sb.fs_dblkno = dblkno
    sb.fs_cgsize = sb.fragroundup(cgsize)
    sb.fs_cssize = sb.fragroundup(ncg * 16)
    sb.fs_csaddr = sb.cgdmin(0)
    csfrags = sb.numfrags(sb.fs_cssize)
    if sb.fs_dblkno + csfrags + frag > fpg:
        raise MkfsError("summary area overflows the first cylinder group")
    sb.fs_dsize = sb.fs_size - sb.fs_sblkno - ncg * (dblkno - sb.fs_sblkno) - csfrags
    sb.fs_maxbpg = sb.fs_nindir
    sb.fs_maxcontig = 1
    sb.fs_rotdelay = 0
    sb.fs_rps = 60
    sb.fs_interleave = 1
    sb.fs_trackskew = 0
    sb.fs_nrpos = 1
    sb.fs_cpc = 0
    sb.fs_csmask = ~(p.fsize - 1)
    sb.fs_csshift = sb.fs_fshift
    return sb


def _init_cg(sb: Superblock, c: int, now: int) -> CylGroup:
    frag = sb.fs_frag
    cg = CylGroup.empty(c, sb.fs_cpg, sb.fs_ipg, sb.fs_fpg, sb.fs_fpg)
    cg.cg_time = now
    cg.cg_cs = CgSummary(cs_nifree=sb.fs_ipg)
    if c == 0:
        for i in range(ROOTINO):
            cg.setinoused(i)
            cg.cg_cs.cs_nifree -= 1
    cbase = sb.cgbase(c)
    dlower = sb.cgsblock(c) - cbase
    dupper = sb.cgdmin(c) - cbase
    if c == 0:
        dupper += sb.numfrags(sb.fs_cssize)
    if c > 0:
        for d in range(0, dlower, frag):
            setblock(sb, cg.blkfree, d // frag)
            cg.cg_cs.cs_nbfree += 1
    r = dupper % frag
    if r:
        cg.cg_frsum[frag - r] += 1
        for d in range(dupper, dupper + frag - r):
            cg.setfree(d)
            cg.cg_cs.cs_nffree += 1
        dupper += frag - r
    for d in range(dupper, sb.fs_fpg, frag):
        setblock(sb, cg.blkfree, d // frag)
        cg.cg_cs.cs_nbfree += 1
    return cg


def _root_block(sb: Superblock, cg: CylGroup) -> int:
    """Take one fragment from the first free block of group 0 for the root directory."""
    for h in range(sb.fs_fpg // sb.fs_frag):
        if isblock(sb, cg.blkfree, h):
            break
    else:
        raise MkfsError("no room for the root directory")
    bno = h * sb.fs_frag
    cg.clrfree(bno)
    cg.cg_cs.cs_nbfree -= 1
    cg.cg_cs.cs_nffree += sb.fs_frag - 1
    if sb.fs_frag > 1:
        cg.cg_frsum[sb.fs_frag - 1] += 1
    return bno


def mkfs_dev(dev: PartitionDev, params: MkfsParams | None = None, clock=None) -> Superblock:
    p = params or MkfsParams()
    sb = plan(dev.size, p)
    now = int((clock or time.time)())
    rng = random.Random(p.seed if p.seed is not None else now)
    sb.fs_time = now
    sb.fs_id0 = now & 0x7FFFFFFF
    sb.fs_id1 = rng.getrandbits(31)
    sb.fs_clean = 1

    cgs = [_init_cg(sb, c, now) for c in range(sb.fs_ncg)]
    rootbno = _root_block(sb, cgs[0])
    cgs[0].setinoused(ROOTINO)
    cgs[0].cg_cs.cs_nifree -= 1
    cgs[0].cg_cs.cs_ndir += 1

    total = CgSummary()
    for cg in cgs:
        total.add(cg.cg_cs)
    sb.fs_cstotal = total

    zero_inodes = bytes(sb.fs_ipg * DINODE_SIZE)
    sbraw = sb.serialize()
    for c, cg in enumerate(cgs):
        dev.write(sb.fsbtodb(sb.cgsblock(c)), sbraw)
        dev.write(sb.fsbtodb(sb.cgtod(c)), cg.serialize(sb.fs_bsize))
        dev.write(sb.fsbtodb(sb.cgimin(c)), zero_inodes)

    # root directory: "." and ".." in one chunk
    from .namespace import DIRBLKSIZ, DT_DIR, pack_entry

    chunk = (pack_entry(ROOTINO, 12, DT_DIR, b".")
             + pack_entry(ROOTINO, DIRBLKSIZ - 12, DT_DIR, b".."))
    dev.write(sb.fsbtodb(rootbno), chunk.ljust(sb.fs_fsize, b"\0"))
    root = Dinode(di_mode=IFDIR | 0o755, di_nlink=2, di_size=DIRBLKSIZ, di_atime=now,
                  di_mtime=now, di_ctime=now, di_blocks=1, di_gen=rng.getrandbits(31))
    root.di_db[0] = rootbno
    iblk = sb.ino_to_fsba(ROOTINO)
    raw = bytearray(dev.read(sb.fsbtodb(iblk), sb.fs_bsize // DEV_BSIZE))
    off = sb.ino_to_fsbo(ROOTINO) * DINODE_SIZE
    raw[off:off + DINODE_SIZE] = root.serialize()
    dev.write(sb.fsbtodb(iblk), bytes(raw))

    csraw = b"".join(pack_csum(cg.cg_cs) for cg in cgs).ljust(sb.fs_cssize, b"\0")
    dev.write(sb.fsbtodb(sb.fs_csaddr), csraw)
    dev.write(SBOFF // DEV_BSIZE, sb.serialize())
    return sb


def mkfs_image(image, letter: str = "a", params: MkfsParams | None = None,
               create_sectors: int | None = None, clock=None) -> Superblock:
    """mkfs on ``image``'s partition, writing a default label first if none is present."""
    owns = not isinstance(image, DiskImage)
    img = open_image(image, create_sectors) if owns else image
    try:
        try:
            lab = read_label(img)
        except LabelError:
            lab = default_label(img.total_sectors)
            write_label(img, lab)
        part = lab.partition(letter)
        if part.p_size == 0:
            raise MkfsError(f"partition {letter} is empty")
        dev = PartitionDev(img, part.p_offset, part.p_size)
        p = params or MkfsParams()
        sb = mkfs_dev(dev, p, clock)
        part.p_fstype = FS_BSDFFS
        part.p_fsize = sb.fs_fsize
        part.p_frag = sb.fs_frag
        part.p_cpg = sb.fs_cpg
        write_label(img, lab)
        img.flush()
        return sb
    finally:
        if owns:
            img.close()


__all__ = ["MkfsParams", "MkfsError", "plan", "mkfs_dev", "mkfs_image"]
