"""On-disk FFS structures (superblock, cylinder group, dinode) and geometry math.

Everything is serialized big-endian.  Frag addresses, block numbers and
inode numbers are plain ints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

FS_MAGIC = 0x011954
CG_MAGIC = 0x090255
SBOFF = 8192
SBSIZE = 8192
BBSIZE = 8192
MAXFRAG = 8
MAXBSIZE = 65536
MAXMNTLEN = 512
DINODE_SIZE = 128
NDADDR = 12
NIADDR = 3
MAXSYMLINKLEN = (NDADDR + NIADDR) * 4
ROOTINO = 2
FS_OPTTIME = 0
FS_OPTSPACE = 1
FS_INODEFMT = 2
FS_DYNAMICPOSTBLFMT = 1

# fs_flags / fs_clean values
FS_ISCLEAN = 1

# (field, struct code); pads keep the classical offsets meaningless but the
# layout fixed
_SB_FIELDS = [
    ("fs_firstfield", "i"), ("fs_unused_1", "i"),
    ("fs_sblkno", "i"), ("fs_cblkno", "i"), ("fs_iblkno", "i"), ("fs_dblkno", "i"),
    ("fs_cgoffset", "i"), ("fs_cgmask", "i"), ("fs_time", "i"),
    ("fs_size", "i"), ("fs_dsize", "i"), ("fs_ncg", "i"),
    ("fs_bsize", "i"), ("fs_fsize", "i"), ("fs_frag", "i"),
    ("fs_minfree", "i"), ("fs_rotdelay", "i"), ("fs_rps", "i"),
    ("fs_bmask", "i"), ("fs_fmask", "i"), ("fs_bshift", "i"), ("fs_fshift", "i"),
    ("fs_maxcontig", "i"), ("fs_maxbpg", "i"),
    ("fs_fragshift", "i"), ("fs_fsbtodb", "i"), ("fs_sbsize", "i"),
    ("fs_csmask", "i"), ("fs_csshift", "i"),
    ("fs_nindir", "i"), ("fs_inopb", "i"), ("fs_nspf", "i"),
    ("fs_optim", "i"), ("fs_npsect", "i"), ("fs_interleave", "i"), ("fs_trackskew", "i"),
    ("fs_id0", "i"), ("fs_id1", "i"),
    ("fs_csaddr", "i"), ("fs_cssize", "i"), ("fs_cgsize", "i"),
    ("fs_ntrak", "i"), ("fs_nsect", "i"), ("fs_spc", "i"), ("fs_ncyl", "i"),
    ("fs_cpg", "i"), ("fs_ipg", "i"), ("fs_fpg", "i"),
    ("cs_ndir", "i"), ("cs_nbfree", "i"), ("cs_nifree", "i"), ("cs_nffree", "i"),
    ("fs_fmod", "b"), ("fs_clean", "b"), ("fs_ronly", "b"), ("fs_flags", "b"),
    ("fs_fsmnt", f"{MAXMNTLEN}s"),
    ("fs_cgrotor", "i"), ("fs_cpc", "i"), ("fs_contigsumsize", "i"),
    ("fs_maxsymlinklen", "i"), ("fs_inodefmt", "i"),
    ("fs_maxfilesize", "Q"), ("fs_qbmask", "q"), ("fs_qfmask", "q"),
    ("fs_postblformat", "i"), ("fs_nrpos", "i"), ("fs_postbloff", "i"),
    ("fs_rotbloff", "i"), ("fs_magic", "i"),
]
_SB = struct.Struct(">" + "".join(code for _, code in _SB_FIELDS))
_SB_NAMES = [n for n, _ in _SB_FIELDS]
_CS_NAMES = ("cs_ndir", "cs_nbfree", "cs_nifree", "cs_nffree")


class FormatError(ValueError):
    """Bad magic number or a truncated on-disk structure."""


@dataclass
class CgSummary:
    cs_ndir: int = 0
    cs_nbfree: int = 0
    cs_nifree: int = 0
    cs_nffree: int = 0

    def astuple(self) -> tuple[int, int, int, int]:
        return (self.cs_ndir, self.cs_nbfree, self.cs_nifree, self.cs_nffree)

    def add(self, other: "CgSummary", sign: int = 1) -> None:
        self.cs_ndir += sign * other.cs_ndir
        self.cs_nbfree += sign * other.cs_nbfree
        self.cs_nifree += sign * other.cs_nifree
        self.cs_nffree += sign * other.cs_nffree

    def copy(self) -> "CgSummary":
        return CgSummary(*self.astuple())


_CSUM = struct.Struct(">4i")


def pack_csum(cs: CgSummary) -> bytes:
    return _CSUM.pack(*cs.astuple())


def unpack_csum(raw: bytes, off: int = 0) -> CgSummary:
    return CgSummary(*_CSUM.unpack_from(raw, off))


def _log2(n: int) -> int:
    if n <= 0 or n & (n - 1):
        raise ValueError(f"{n} is not a power of two")
    return n.bit_length() - 1


@dataclass
class Superblock:
    fs_firstfield: int = 0
    fs_unused_1: int = 0
    fs_sblkno: int = 0
    fs_cblkno: int = 0
    fs_iblkno: int = 0
    fs_dblkno: int = 0
    fs_cgoffset: int = 0
    fs_cgmask: int = -1
    fs_time: int = 0
    fs_size: int = 0
    fs_dsize: int = 0
    fs_ncg: int = 0
    fs_bsize: int = 8192
    fs_fsize: int = 1024
    fs_frag: int = 8
    fs_minfree: int = 10
    fs_rotdelay: int = 0
    fs_rps: int = 60
    fs_bmask: int = 0
    fs_fmask: int = 0
    fs_bshift: int = 0
    fs_fshift: int = 0
    fs_maxcontig: int = 1
    fs_maxbpg: int = 0
    fs_fragshift: int = 0
    fs_fsbtodb: int = 0
    fs_sbsize: int = SBSIZE
    fs_csmask: int = 0
    fs_csshift: int = 0
    fs_nindir: int = 0
    fs_inopb: int = 0
    fs_nspf: int = 0
    fs_optim: int = FS_OPTTIME
    fs_npsect: int = 0
    fs_interleave: int = 1
    fs_trackskew: int = 0
    fs_id0: int = 0
    fs_id1: int = 0
    fs_csaddr: int = 0
    fs_cssize: int = 0
    fs_cgsize: int = 0
    fs_ntrak: int = 16
    fs_nsect: int = 32
    fs_spc: int = 512
    fs_ncyl: int = 0
    fs_cpg: int = 0
    fs_ipg: int = 0
    fs_fpg: int = 0
    fs_cstotal: CgSummary = field(default_factory=CgSummary)
    fs_fmod: int = 0
    fs_clean: int = 0
    fs_ronly: int = 0
    fs_flags: int = 0
    fs_fsmnt: bytes = b""
    fs_cgrotor: int = 0
    fs_cpc: int = 0
    fs_contigsumsize: int = 0
    fs_maxsymlinklen: int = MAXSYMLINKLEN
    fs_inodefmt: int = FS_INODEFMT
    fs_maxfilesize: int = 0
    fs_qbmask: int = 0
    fs_qfmask: int = 0
    fs_postblformat: int = FS_DYNAMICPOSTBLFMT
    fs_nrpos: int = 1
    fs_postbloff: int = 0
    fs_rotbloff: int = 0
    fs_magic: int = FS_MAGIC

    def derive(self) -> "Superblock":
        """Fill every field that follows from bsize, fsize and the geometry."""
        self.fs_frag = self.fs_bsize // self.fs_fsize
        self.fs_bshift = _log2(self.fs_bsize)
        self.fs_fshift = _log2(self.fs_fsize)
        self.fs_fragshift = _log2(self.fs_frag)
        self.fs_bmask = ~(self.fs_bsize - 1)
        self.fs_fmask = ~(self.fs_fsize - 1)
        self.fs_qbmask = ~self.fs_bmask
        self.fs_qfmask = ~self.fs_fmask
        self.fs_nspf = self.fs_fsize // 512
        self.fs_fsbtodb = _log2(self.fs_nspf)
        self.fs_nindir = self.fs_bsize // 4
        self.fs_inopb = self.fs_bsize // DINODE_SIZE
        nind = self.fs_nindir
        nblocks = NDADDR + nind + nind ** 2 + nind ** 3
        self.fs_maxfilesize = min(nblocks * self.fs_bsize, 2 ** 64 - 1)
        return self

    # offsets within a block or file (64-bit clean)
    def blkoff(self, loc: int) -> int:
        return loc & self.fs_qbmask

    def fragoff(self, loc: int) -> int:
        return loc & self.fs_qfmask

    def lblkno(self, loc: int) -> int:
        return loc >> self.fs_bshift

    def lblktosize(self, blk: int) -> int:
        return blk << self.fs_bshift

    def numfrags(self, loc: int) -> int:
        return loc >> self.fs_fshift

    def blkroundup(self, size: int) -> int:
        return (size + self.fs_qbmask) & self.fs_bmask

    def fragroundup(self, size: int) -> int:
        return (size + self.fs_qfmask) & self.fs_fmask

    def fragstoblks(self, frags: int) -> int:
        return frags >> self.fs_fragshift

    def blkstofrags(self, blks: int) -> int:
        return blks << self.fs_fragshift

    def fragnum(self, fsb: int) -> int:
        return fsb & (self.fs_frag - 1)

    def blknum(self, fsb: int) -> int:
        return fsb & ~(self.fs_frag - 1)

    # device and group addressing
    def fsbtodb(self, b: int) -> int:
        return b << self.fs_fsbtodb

    def dbtofsb(self, b: int) -> int:
        return b >> self.fs_fsbtodb

    def dtog(self, d: int) -> int:
        return d // self.fs_fpg

    def dtogd(self, d: int) -> int:
        return d % self.fs_fpg

    def ino_to_cg(self, ino: int) -> int:
        return ino // self.fs_ipg

    def ino_to_fsba(self, ino: int) -> int:
        cg = self.ino_to_cg(ino)
        return self.cgimin(cg) + self.blkstofrags((ino % self.fs_ipg) // self.fs_inopb)

    def ino_to_fsbo(self, ino: int) -> int:
        return ino % self.fs_inopb

    def cgbase(self, c: int) -> int:
        return self.fs_fpg * c

    def cgstart(self, c: int) -> int:
        return self.cgbase(c) + self.fs_cgoffset * (c & ~self.fs_cgmask)

    def cgsblock(self, c: int) -> int:
        return self.cgstart(c) + self.fs_sblkno

    def cgtod(self, c: int) -> int:
        return self.cgstart(c) + self.fs_cblkno

    def cgimin(self, c: int) -> int:
        return self.cgstart(c) + self.fs_iblkno

    def cgdmin(self, c: int) -> int:
        return self.cgstart(c) + self.fs_dblkno

    # sizes
    def blksize(self, isize: int, lbn: int) -> int:
        if lbn >= NDADDR or isize >= (lbn + 1) << self.fs_bshift:
            return self.fs_bsize
        return self.fragroundup(self.blkoff(isize))

    def freespace(self, percentreserved: int) -> int:
        cs = self.fs_cstotal
        return (cs.cs_nbfree * self.fs_frag + cs.cs_nffree
                - self.fs_dsize * percentreserved // 100)

    @property
    def INOPB(self) -> int:
        return self.fs_inopb

    @property
    def NSPF(self) -> int:
        return self.fs_nspf

    @property
    def NSPB(self) -> int:
        return self.fs_nspf << self.fs_fragshift

    @property
    def CGSIZE(self) -> int:
        return cg_size(self.fs_ipg, self.fs_fpg)

    @property
    def maxino(self) -> int:
        return self.fs_ipg * self.fs_ncg

    def serialize(self) -> bytes:
        vals = []
        for name in _SB_NAMES:
            if name in _CS_NAMES:
                vals.append(getattr(self.fs_cstotal, name))
            else:
                vals.append(getattr(self, name))
        raw = _SB.pack(*vals)
        return raw + bytes(self.fs_sbsize - len(raw))

    @classmethod
    def parse(cls, raw: bytes) -> "Superblock":
        if len(raw) < _SB.size:
            raise FormatError("truncated superblock")
        vals = dict(zip(_SB_NAMES, _SB.unpack_from(raw)))
        if vals["fs_magic"] != FS_MAGIC:
            raise FormatError(f"bad superblock magic 0x{vals['fs_magic'] & 0xffffffff:x}")
        cs = CgSummary(*(vals.pop(n) for n in _CS_NAMES))
        vals["fs_fsmnt"] = vals["fs_fsmnt"].rstrip(b"\0")
        return cls(fs_cstotal=cs, **vals)


def off_conversions(sb: Superblock) -> dict:
    names = ("blkoff", "fragoff", "lblkno", "lblktosize", "numfrags", "blkroundup",
             "fragroundup", "fragstoblks", "blkstofrags", "fragnum", "blknum")
    return {n: getattr(sb, n) for n in names}


def addr_conversions(sb: Superblock) -> dict:
    names = ("fsbtodb", "dbtofsb", "dtog", "dtogd", "ino_to_cg", "ino_to_fsba", "ino_to_fsbo")
    return {n: getattr(sb, n) for n in names}


def cg_locators(sb: Superblock) -> dict:
    def guard(fn):
        def locate(c: int) -> int:
            if not 0 <= c < sb.fs_ncg:
                raise IndexError(f"cylinder group {c} out of range 0..{sb.fs_ncg - 1}")
            return fn(c)
        return locate
    names = ("cgbase", "cgstart", "cgsblock", "cgimin", "cgdmin", "cgtod")
    return {n: guard(getattr(sb, n)) for n in names}


def size_helpers(sb: Superblock) -> dict:
    return {"blksize": sb.blksize, "freespace": sb.freespace, "CGSIZE": sb.CGSIZE,
            "INOPB": sb.INOPB, "NSPF": sb.NSPF, "NSPB": sb.NSPB}


# cylinder group header: firstfield magic time cgx ncyl niblk ndblk cs[4]
# rotor frotor irotor frsum[8] iusedoff freeoff nextfreeoff
_CG_HDR = struct.Struct(">iiiihhi4iiii8iiii")
CG_HDRSIZE = _CG_HDR.size


def cg_size(ipg: int, fpg: int) -> int:
    return CG_HDRSIZE + (ipg + 7) // 8 + (fpg + 7) // 8


@dataclass
class CylGroup:
    cg_cgx: int
    cg_ncyl: int
    cg_niblk: int
    cg_ndblk: int
    inosused: bytearray
    blkfree: bytearray
    cg_magic: int = CG_MAGIC
    cg_time: int = 0
    cg_cs: CgSummary = field(default_factory=CgSummary)
    cg_rotor: int = 0
    cg_frotor: int = 0
    cg_irotor: int = 0
    cg_frsum: list[int] = field(default_factory=lambda: [0] * MAXFRAG)

    @classmethod
    def empty(cls, cgx: int, ncyl: int, ipg: int, fpg: int, ndblk: int) -> "CylGroup":
        return cls(cgx, ncyl, ipg, ndblk, bytearray((ipg + 7) // 8), bytearray((fpg + 7) // 8))

    # bitmap helpers; blkfree bit set means free
    def isfree(self, frag: int) -> bool:
        return bool(self.blkfree[frag >> 3] & (1 << (frag & 7)))

    def setfree(self, frag: int) -> None:
        self.blkfree[frag >> 3] |= 1 << (frag & 7)

    def clrfree(self, frag: int) -> None:
        self.blkfree[frag >> 3] &= ~(1 << (frag & 7)) & 0xFF

    def isinoused(self, i: int) -> bool:
        return bool(self.inosused[i >> 3] & (1 << (i & 7)))

    def setinoused(self, i: int) -> None:
        self.inosused[i >> 3] |= 1 << (i & 7)

    def clrinoused(self, i: int) -> None:
        self.inosused[i >> 3] &= ~(1 << (i & 7)) & 0xFF

    def serialize(self, size: int | None = None) -> bytes:
        iusedoff = CG_HDRSIZE
        freeoff = iusedoff + len(self.inosused)
        nextfree = freeoff + len(self.blkfree)
        hdr = _CG_HDR.pack(0, self.cg_magic, self.cg_time, self.cg_cgx,
                           self.cg_ncyl, self.cg_niblk, self.cg_ndblk,
                           *self.cg_cs.astuple(),
                           self.cg_rotor, self.cg_frotor, self.cg_irotor,
                           *self.cg_frsum, iusedoff, freeoff, nextfree)
        raw = hdr + bytes(self.inosused) + bytes(self.blkfree)
        if size is not None:
            raw += bytes(size - len(raw))
        return raw

    @classmethod
    def parse(cls, raw: bytes) -> "CylGroup":
        if len(raw) < CG_HDRSIZE:
            raise FormatError("truncated cylinder group")
        v = _CG_HDR.unpack_from(raw)
        if v[1] != CG_MAGIC:
            raise FormatError(f"bad cylinder group magic 0x{v[1] & 0xffffffff:x}")
        iusedoff, freeoff, nextfree = v[22:25]
        if not CG_HDRSIZE <= iusedoff <= freeoff <= nextfree <= len(raw):
            raise FormatError("truncated cylinder group")
        return cls(cg_cgx=v[3], cg_ncyl=v[4], cg_niblk=v[5], cg_ndblk=v[6],
                   inosused=bytearray(raw[iusedoff:freeoff]),
                   blkfree=bytearray(raw[freeoff:nextfree]),
                   cg_magic=v[1], cg_time=v[2], cg_cs=CgSummary(*v[7:11]),
                   cg_rotor=v[11], cg_frotor=v[12], cg_irotor=v[13],
                   cg_frsum=list(v[14:22]))


# file type bits and permissions
IFMT = 0o170000
IFIFO = 0o010000
IFCHR = 0o020000
IFDIR = 0o040000
IFBLK = 0o060000
IFREG = 0o100000
IFLNK = 0o120000
IFSOCK = 0o140000
IFWHT = 0o160000

_DINODE = struct.Struct(">Hh4sQiiiiii12i3iIIiII2i")
assert _DINODE.size == DINODE_SIZE


@dataclass
class Dinode:
    di_mode: int = 0
    di_nlink: int = 0
    di_size: int = 0
    di_atime: int = 0
    di_atimensec: int = 0
    di_mtime: int = 0
    di_mtimensec: int = 0
    di_ctime: int = 0
    di_ctimensec: int = 0
    di_db: list[int] = field(default_factory=lambda: [0] * NDADDR)
    di_ib: list[int] = field(default_factory=lambda: [0] * NIADDR)
    di_flags: int = 0
    di_blocks: int = 0
    di_gen: int = 0
    di_uid: int = 0
    di_gid: int = 0

    @property
    def ifmt(self) -> int:
        return self.di_mode & IFMT

    @property
    def di_rdev(self) -> int:
        return self.di_db[0]

    @property
    def shortlink(self) -> bytes:
        """Symlink target stored in place of the block pointers."""
        raw = struct.pack(">12i3i", *self.di_db, *self.di_ib)
        return raw[: self.di_size]

    @shortlink.setter
    def shortlink(self, target: bytes) -> None:
        if len(target) > MAXSYMLINKLEN:
            raise ValueError("target too long for the inode")
        ptrs = struct.unpack(">15i", target.ljust(MAXSYMLINKLEN, b"\0"))
        self.di_db = list(ptrs[:NDADDR])
        self.di_ib = list(ptrs[NDADDR:])

    def serialize(self) -> bytes:
        return _DINODE.pack(self.di_mode, self.di_nlink, b"\0" * 4, self.di_size,
                            self.di_atime, self.di_atimensec, self.di_mtime,
                            self.di_mtimensec, self.di_ctime, self.di_ctimensec,
                            *self.di_db, *self.di_ib, self.di_flags, self.di_blocks,
                            self.di_gen, self.di_uid, self.di_gid, 0, 0)

    @classmethod
    def parse(cls, raw: bytes, off: int = 0) -> "Dinode":
        if len(raw) - off < DINODE_SIZE:
            raise FormatError("truncated dinode")
        v = _DINODE.unpack_from(raw, off)
        return cls(v[0], v[1], v[3], v[4], v[5], v[6], v[7], v[8], v[9],
                   list(v[10:22]), list(v[22:25]), v[25], v[26], v[27], v[28], v[29])

    def copy(self) -> "Dinode":
        return Dinode.parse(self.serialize())
