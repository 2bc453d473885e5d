"""Sector-addressed disk images, BSD disklabels and generic disk metrics."""

from __future__ import annotations

import errno
import os
import struct
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable

SECTOR_SIZE = 512
DEV_BSIZE = SECTOR_SIZE
LABELSECTOR = 0
LABELOFFSET = 128
MAXPARTITIONS = 8
RAW_PART = 2
DISKMAGIC = 0x82564557

FS_UNUSED = 0
FS_BSDFFS = 7

# header fields in on-disk order; 148 bytes
_LABEL_HDR = struct.Struct(">IHH16s16s6I2HI4H3I5I5IIHHII")
_PART = struct.Struct(">IIIBBH")
LABEL_MAXSIZE = _LABEL_HDR.size + MAXPARTITIONS * _PART.size


class Panic(RuntimeError):
    """Invariant violation that the kernel would panic on."""


class LabelError(ValueError):
    pass


def _usec() -> int:
    return time.monotonic_ns() // 1000


@dataclass
class DiskMetrics:
    """Busy/transfer accounting bracketed around every device transfer.

    Times are integer microseconds from an injectable monotonic clock.
    """

    busy: int = 0
    rxfer: int = 0
    wxfer: int = 0
    rbytes: int = 0
    wbytes: int = 0
    attach_time: int = 0
    timestamp: int = 0
    time_busy: int = 0
    clock: Callable[[], int] = field(default=_usec, repr=False, compare=False)

    def attach(self) -> None:
        self.attach_time = self.timestamp = self.clock()

    def disk_busy(self) -> None:
        if self.busy == 0:
            self.timestamp = self.clock()
        self.busy += 1

    def disk_unbusy(self, bcount: int, read: bool) -> None:
        if self.busy == 0:
            raise Panic("disk_unbusy: busy count underflow")
        self.busy -= 1
        now = self.clock()
        # charge the elapsed time since the last edge, so overlapping
        # transfers count once
        self.time_busy += now - self.timestamp
        self.timestamp = now
        if bcount > 0:
            if read:
                self.rbytes += bcount
                self.rxfer += 1
            else:
                self.wbytes += bcount
                self.wxfer += 1

    def resetstat(self) -> None:
        self.rxfer = self.wxfer = self.rbytes = self.wbytes = 0
        self.time_busy = 0
        self.timestamp = self.clock()

    def snapshot(self) -> "DiskMetrics":
        return replace(self)


class DiskImage:
    """A flat file viewed as an array of 512-byte sectors."""

    sector_size = SECTOR_SIZE

    def __init__(self, path, total_sectors: int, fh, clock=None):
        self.path = os.fspath(path)
        self.total_sectors = total_sectors
        self._fh = fh
        self.metrics = DiskMetrics(clock=clock) if clock else DiskMetrics()
        self.metrics.attach()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def flush(self) -> None:
        self._fh.flush()

    def __repr__(self) -> str:
        return f"DiskImage({self.path!r}, {self.total_sectors} sectors)"


def open_image(path, create_sectors: int | None = None, clock=None) -> DiskImage:
    """Open an existing image, or create a zero-filled one of ``create_sectors``."""
    if create_sectors is not None:
        if create_sectors <= 0:
            raise ValueError("create_sectors must be positive")
        with open(path, "wb") as fh:
            fh.truncate(create_sectors * SECTOR_SIZE)
    if not os.path.exists(path):
        raise FileNotFoundError(errno.ENOENT, os.strerror(errno.ENOENT), os.fspath(path))
    length = os.path.getsize(path)
    if length == 0 or length % SECTOR_SIZE:
        raise ValueError(f"{path}: image size {length} not sector aligned")
    return DiskImage(path, length // SECTOR_SIZE, open(path, "r+b"), clock)


def rw_sectors(img: DiskImage, start: int, count: int, write: bool,
               buf: bytes | bytearray | memoryview | None = None) -> bytes | None:
    """Transfer ``count`` sectors at ``start``.

    Reads return the bytes; writes take them from ``buf``.
    """
    if start < 0 or count < 0 or start + count > img.total_sectors:
        raise OSError(f"sector range {start}+{count} outside 0..{img.total_sectors}")
    nbytes = count * SECTOR_SIZE
    if write and (buf is None or len(buf) != nbytes):
        raise ValueError(f"write buffer must be {nbytes} bytes")
    m = img.metrics
    m.disk_busy()
    try:
        img._fh.seek(start * SECTOR_SIZE)
        if write:
            img._fh.write(buf)
            out = None
        else:
            out = img._fh.read(nbytes)
    finally:
        m.disk_unbusy(nbytes, read=not write)
    return out


def metrics(img: DiskImage, reset: bool = False) -> DiskMetrics:
    snap = img.metrics.snapshot()
    if reset:
        img.metrics.resetstat()
    return snap


@dataclass
class Partition:
    p_size: int = 0
    p_offset: int = 0
    p_fsize: int = 0
    p_fstype: int = FS_UNUSED
    p_frag: int = 0
    p_cpg: int = 0


@dataclass
class DiskLabel:
    d_magic: int = DISKMAGIC
    d_type: int = 0
    d_subtype: int = 0
    d_typename: bytes = b""
    d_packname: bytes = b""
    d_secsize: int = SECTOR_SIZE
    d_nsectors: int = 0
    d_ntracks: int = 0
    d_ncylinders: int = 0
    d_secpercyl: int = 0
    d_secperunit: int = 0
    d_sparespertrack: int = 0
    d_sparespercyl: int = 0
    d_acylinders: int = 0
    d_rpm: int = 3600
    d_interleave: int = 1
    d_trackskew: int = 0
    d_cylskew: int = 0
    d_headswitch: int = 0
    d_trkseek: int = 0
    d_flags: int = 0
    d_drivedata: list[int] = field(default_factory=lambda: [0] * 5)
    d_spare: list[int] = field(default_factory=lambda: [0] * 5)
    d_magic2: int = DISKMAGIC
    d_checksum: int = 0
    d_npartitions: int = MAXPARTITIONS
    d_bbsize: int = 8192
    d_sbsize: int = 8192
    partitions: list[Partition] = field(
        default_factory=lambda: [Partition() for _ in range(MAXPARTITIONS)])

    def validate(self) -> None:
        if self.d_magic != DISKMAGIC or self.d_magic2 != DISKMAGIC:
            raise LabelError("bad magic")
        if not 0 <= self.d_npartitions <= MAXPARTITIONS:
            raise LabelError(f"d_npartitions {self.d_npartitions} > {MAXPARTITIONS}")
        if len(self.partitions) != MAXPARTITIONS:
            raise LabelError("partition table must have 8 slots")
        for i, p in enumerate(self.partitions[: self.d_npartitions]):
            if p.p_size and p.p_offset + p.p_size > self.d_secperunit:
                raise LabelError(f"partition {chr(97 + i)} extends past unit")
            if p.p_fstype == FS_BSDFFS and p.p_frag not in (0, 1, 2, 4, 8):
                raise LabelError(f"partition {chr(97 + i)}: bad p_frag {p.p_frag}")

    def partition(self, letter: str) -> Partition:
        idx = ord(letter) - ord("a")
        if not 0 <= idx < self.d_npartitions:
            raise LabelError(f"no partition {letter!r}")
        p = self.partitions[idx]
        if p.p_size == 0:
            raise LabelError(f"partition {letter!r} is empty")
        return p


def _pack_header(lab: DiskLabel, checksum: int) -> bytes:
    return _LABEL_HDR.pack(
        lab.d_magic, lab.d_type, lab.d_subtype,
        lab.d_typename, lab.d_packname,
        lab.d_secsize, lab.d_nsectors, lab.d_ntracks, lab.d_ncylinders,
        lab.d_secpercyl, lab.d_secperunit,
        lab.d_sparespertrack, lab.d_sparespercyl, lab.d_acylinders,
        lab.d_rpm, lab.d_interleave, lab.d_trackskew, lab.d_cylskew,
        lab.d_headswitch, lab.d_trkseek, lab.d_flags,
        *lab.d_drivedata, *lab.d_spare,
        lab.d_magic2, checksum, lab.d_npartitions, lab.d_bbsize, lab.d_sbsize)


def label_bytes(lab: DiskLabel, checksum: int | None = None) -> bytes:
    """Serialized label covering the header and all eight partition slots."""
    if checksum is None:
        checksum = lab.d_checksum
    parts = b"".join(_PART.pack(p.p_size, p.p_offset, p.p_fsize, p.p_fstype,
                                p.p_frag, p.p_cpg) for p in lab.partitions)
    return _pack_header(lab, checksum) + parts


def dkcksum(raw: bytes, npartitions: int) -> int:
    """XOR of big-endian halfwords up to the last declared partition."""
    n = _LABEL_HDR.size + npartitions * _PART.size
    words = struct.unpack(f">{n // 2}H", raw[:n])
    ck = 0
    for w in words:
        ck ^= w
    return ck


def label_checksum(lab: DiskLabel) -> int:
    return dkcksum(label_bytes(lab, checksum=0), lab.d_npartitions)


def parse_label(raw: bytes) -> DiskLabel:
    if len(raw) < _LABEL_HDR.size:
        raise LabelError("truncated label")
    v = _LABEL_HDR.unpack_from(raw)
    if v[0] != DISKMAGIC:
        raise LabelError("bad magic")
    lab = DiskLabel(
        d_magic=v[0], d_type=v[1], d_subtype=v[2],
        d_typename=v[3].rstrip(b"\0"), d_packname=v[4].rstrip(b"\0"),
        d_secsize=v[5], d_nsectors=v[6], d_ntracks=v[7], d_ncylinders=v[8],
        d_secpercyl=v[9], d_secperunit=v[10],
        d_sparespertrack=v[11], d_sparespercyl=v[12], d_acylinders=v[13],
        d_rpm=v[14], d_interleave=v[15], d_trackskew=v[16], d_cylskew=v[17],
        d_headswitch=v[18], d_trkseek=v[19], d_flags=v[20],
        d_drivedata=list(v[21:26]), d_spare=list(v[26:31]),
        d_magic2=v[31], d_checksum=v[32], d_npartitions=v[33],
        d_bbsize=v[34], d_sbsize=v[35], partitions=[])
    if lab.d_magic2 != DISKMAGIC:
        raise LabelError("bad magic")
    if lab.d_npartitions > MAXPARTITIONS:
        raise LabelError(f"d_npartitions {lab.d_npartitions} > {MAXPARTITIONS}")
    if len(raw) < LABEL_MAXSIZE:
        raise LabelError("truncated label")
    for i in range(MAXPARTITIONS):
        lab.partitions.append(Partition(*_PART.unpack_from(raw, _LABEL_HDR.size + i * _PART.size)))
    if dkcksum(raw, lab.d_npartitions) != 0:
        # xor over a region that includes the stored checksum is zero iff valid
        raise LabelError("bad checksum")
    return lab


def read_label(img: DiskImage) -> DiskLabel:
    sector = rw_sectors(img, LABELSECTOR, 1, write=False)
    return parse_label(sector[LABELOFFSET:])


def write_label(img: DiskImage, lab: DiskLabel) -> None:
    lab.validate()
    for f in ("d_typename", "d_packname"):
        if len(getattr(lab, f)) > 16:
            raise LabelError(f"{f} longer than 16 bytes")
    lab.d_checksum = label_checksum(lab)
    sector = bytearray(rw_sectors(img, LABELSECTOR, 1, write=False))
    raw = label_bytes(lab)
    sector[LABELOFFSET:LABELOFFSET + len(raw)] = raw
    rw_sectors(img, LABELSECTOR, 1, write=True, buf=bytes(sector))


def default_label(total_sectors: int, nsectors: int = 32, ntracks: int = 16) -> DiskLabel:
    """Label with partition 'a' and raw partition 'c' spanning the unit."""
    spc = nsectors * ntracks
    lab = DiskLabel(
        d_typename=b"image", d_packname=b"default",
        d_nsectors=nsectors, d_ntracks=ntracks, d_secpercyl=spc,
        d_ncylinders=total_sectors // spc, d_secperunit=total_sectors)
    lab.partitions[0] = Partition(p_size=total_sectors, p_offset=0, p_fstype=FS_BSDFFS)
    lab.partitions[RAW_PART] = Partition(p_size=total_sectors, p_offset=0)
    return lab


def label_text(lab: DiskLabel) -> str:
    """Human-readable label, one field per line, then the partition table."""
    out = []
    for f in fields(lab):
        if f.name == "partitions":
            continue
        v = getattr(lab, f.name)
        if isinstance(v, bytes):
            v = v.decode("latin-1")
        elif f.name in ("d_magic", "d_magic2", "d_checksum"):
            v = f"0x{v:x}"
        elif isinstance(v, list):
            v = " ".join(str(x) for x in v)
        out.append(f"{f.name}: {v}")
    out.append("#        size   offset    fstype fsize frag cpg")
    for i, p in enumerate(lab.partitions[: lab.d_npartitions]):
        if p.p_size:
            out.append(f"{chr(97 + i)}: {p.p_size:8d} {p.p_offset:8d} {p.p_fstype:9d} "
                       f"{p.p_fsize:5d} {p.p_frag:4d} {p.p_cpg:3d}")
    return "\n".join(out) + "\n"


def parse_label_text(text: str) -> DiskLabel:
    """Inverse of :func:`label_text`."""
    lab = DiskLabel()
    by_name = {f.name: f for f in fields(DiskLabel)}
    parts = [Partition() for _ in range(MAXPARTITIONS)]
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(":")
        rest = rest.strip()
        if len(key) == 1 and key.isalpha():
            nums = [int(x) for x in rest.split()]
            if len(nums) != 6:
                raise LabelError(f"bad partition line: {line!r}")
            size, offset, fstype, fsize, frag, cpg = nums
            parts[ord(key) - 97] = Partition(size, offset, fsize, fstype, frag, cpg)
            continue
        if key not in by_name:
            raise LabelError(f"unknown label field {key!r}")
        cur = getattr(lab, key)
        if isinstance(cur, bytes):
            setattr(lab, key, rest.encode("latin-1"))
        elif isinstance(cur, list):
            setattr(lab, key, [int(x, 0) for x in rest.split()])
        else:
            setattr(lab, key, int(rest, 0))
    lab.partitions = parts
    return lab


class PartitionDev:
    """Sector window onto one partition of an image."""

    def __init__(self, img: DiskImage, offset: int, size: int):
        self.img = img
        self.offset = offset
        self.size = size

    @classmethod
    def open(cls, img: DiskImage, letter: str = "a") -> "PartitionDev":
        p = read_label(img).partition(letter)
        return cls(img, p.p_offset, p.p_size)

    def read(self, sector: int, count: int) -> bytes:
        self._check(sector, count)
        return rw_sectors(self.img, self.offset + sector, count, write=False)

    def write(self, sector: int, data: bytes) -> None:
        count = len(data) // SECTOR_SIZE
        self._check(sector, count)
        rw_sectors(self.img, self.offset + sector, count, write=True, buf=data)

    def _check(self, sector: int, count: int) -> None:
        if sector < 0 or sector + count > self.size:
            raise OSError(f"partition range {sector}+{count} outside 0..{self.size}")
