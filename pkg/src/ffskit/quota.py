"""Disk quotas: on-disk records, the in-core dquot cache and the enforcement checks."""

from __future__ import annotations

import errno
import logging
import struct
from collections import OrderedDict
from dataclasses import astuple, dataclass, field
from enum import IntFlag

from .devimg import Panic
from .inode import IoCursor, fserr, iput, read, write
from .layout import IFMT, IFREG, ROOTINO

log = logging.getLogger(__name__)

USRQUOTA, GRPQUOTA = 0, 1
MAXQUOTAS = 2
QTYPE_NAMES = ("user", "group")
MAX_DQ_TIME = 7 * 24 * 60 * 60
MAX_IQ_TIME = 7 * 24 * 60 * 60

_REC = struct.Struct(">8I")
RECSIZE = _REC.size


class DQ(IntFlag):
    MOD = 0x04
    FAKE = 0x08
    BLKS = 0x10
    INODS = 0x20


@dataclass
class QuotaRecord:
    dqb_bhardlimit: int = 0
    dqb_bsoftlimit: int = 0
    dqb_curblocks: int = 0
    dqb_ihardlimit: int = 0
    dqb_isoftlimit: int = 0
    dqb_curinodes: int = 0
    dqb_btime: int = 0
    dqb_itime: int = 0

    def pack(self) -> bytes:
        return _REC.pack(*astuple(self))

    @classmethod
    def unpack(cls, raw: bytes) -> "QuotaRecord":
        return cls(*_REC.unpack(raw))

    @property
    def unlimited(self) -> bool:
        return not (self.dqb_bhardlimit or self.dqb_bsoftlimit
                    or self.dqb_ihardlimit or self.dqb_isoftlimit)


@dataclass
class Dquot:
    type: int
    id: int
    record: QuotaRecord = field(default_factory=QuotaRecord)
    flags: DQ = DQ(0)
    refcount: int = 0

    @property
    def key(self) -> tuple[int, int]:
        return (self.type, self.id)


def _over(limit: int, value: int) -> bool:
    return limit != 0 and value > limit


def block_decision(rec: QuotaRecord, delta: int, now: int, privileged: bool = False,
                   fake: bool = False) -> tuple[bool, str | None]:
    """(allowed, event) for adding ``delta`` frags; a pure function of its inputs."""
    if delta <= 0 or privileged or fake:
        return True, None
    ncur = rec.dqb_curblocks + delta
    if _over(rec.dqb_bhardlimit, ncur):
        return False, "block limit reached"
    if _over(rec.dqb_bsoftlimit, ncur):
        if not _over(rec.dqb_bsoftlimit, rec.dqb_curblocks):
            return True, "block quota exceeded"
        if now > rec.dqb_btime:
            return False, "block quota exceeded for too long"
    return True, None


def inode_decision(rec: QuotaRecord, delta: int, now: int, privileged: bool = False,
                   fake: bool = False) -> tuple[bool, str | None]:
    if delta <= 0 or privileged or fake:
        return True, None
    ncur = rec.dqb_curinodes + delta
    if _over(rec.dqb_ihardlimit, ncur):
        return False, "inode limit reached"
    if _over(rec.dqb_isoftlimit, ncur):
        if not _over(rec.dqb_isoftlimit, rec.dqb_curinodes):
            return True, "inode quota exceeded"
        if now > rec.dqb_itime:
            return False, "inode quota exceeded for too long"
    return True, None


class QuotaSystem:
    """Quota state for one mounted filesystem."""

    def __init__(self, fs, cache_limit: int = 1024):
        self.fs = fs
        self.files = [None] * MAXQUOTAS
        self.btime = [MAX_DQ_TIME] * MAXQUOTAS
        self.itime = [MAX_IQ_TIME] * MAXQUOTAS
        self.hash: dict[tuple[int, int], Dquot] = {}
        self.lru: OrderedDict[tuple[int, int], Dquot] = OrderedDict()
        self.cache_limit = cache_limit
        self.events: list[tuple] = []

    # helpers

    def active(self, type_: int) -> bool:
        return self.files[type_] is not None

    @property
    def enabled(self) -> bool:
        return any(f is not None for f in self.files)

    def quota_inos(self) -> set[int]:
        return {f.number for f in self.files if f is not None}

    def _owner(self, ip, type_: int) -> int:
        return ip.din.di_uid if type_ == USRQUOTA else ip.din.di_gid

    def _warn(self, dq: Dquot, msg: str) -> None:
        ev = ("quota", QTYPE_NAMES[dq.type], dq.id, msg)
        self.events.append(ev)
        log.info("%s %d: %s", QTYPE_NAMES[dq.type], dq.id, msg)

    # quota files

    def quota_on(self, type_: int, path) -> None:
        from .namespace import lookup

        ip = lookup(self.fs, path)
        if ip.ifmt != IFREG:
            iput(ip)
            raise fserr(errno.EACCES, "quota file is not a regular file")
        if self.files[type_] is not None:
            self.quota_off(type_)
        for dq in [d for d in self.hash.values() if d.type == type_]:
            self._drop(dq)
        self.files[type_] = ip
        for other in list(self.fs.ihash.values()):
            self.getinoquota(other)

    def quota_off(self, type_: int) -> None:
        qip = self.files[type_]
        if qip is None:
            return
        for ip in list(self.fs.ihash.values()):
            dq = ip.dquot[type_]
            if dq is not None:
                ip.dquot[type_] = None
                self.dqrele(dq)
        for dq in [d for d in self.hash.values() if d.type == type_]:
            self.dqsync(dq)
            self._drop(dq)
        self.files[type_] = None
        iput(qip)

    def _drop(self, dq: Dquot) -> None:
        self.hash.pop(dq.key, None)
        self.lru.pop(dq.key, None)

    # dquot cache

    def _read_record(self, type_: int, id_: int) -> QuotaRecord:
        qip = self.files[type_]
        off = id_ * RECSIZE
        if off + RECSIZE > qip.size:
            return QuotaRecord()
        uio = IoCursor.reader(off, RECSIZE)
        read(qip, uio, noatime=True)
        raw = uio.data()
        return QuotaRecord.unpack(raw.ljust(RECSIZE, b"\0"))

    def dqget(self, type_: int, id_: int) -> Dquot:
        if not self.active(type_):
            raise fserr(errno.ESRCH, f"{QTYPE_NAMES[type_]} quotas are off")
        key = (type_, id_)
        dq = self.hash.get(key)
        if dq is not None:
            if dq.refcount == 0:
                self.lru.pop(key, None)
            dq.refcount += 1
            return dq
        while len(self.hash) >= self.cache_limit and self.lru:
            _, victim = self.lru.popitem(last=False)
            self.dqsync(victim)
            self.hash.pop(victim.key, None)
        rec = self._read_record(type_, id_)
        dq = Dquot(type_, id_, rec, DQ(0), 1)
        if rec.unlimited:
            dq.flags |= DQ.FAKE
        self.hash[key] = dq
        return dq

    def dqrele(self, dq: Dquot | None) -> None:
        if dq is None:
            return
        if dq.refcount <= 0:
            raise Panic(f"dqrele: {dq.key} refcount")
        dq.refcount -= 1
        if dq.refcount == 0:
            if dq.flags & DQ.MOD:
                self.dqsync(dq)
            self.lru[dq.key] = dq

    def dqsync(self, dq: Dquot) -> None:
        if not dq.flags & DQ.MOD:
            return
        qip = self.files[dq.type]
        if qip is None:
            return
        write(qip, IoCursor.writer(dq.id * RECSIZE, dq.record.pack()))
        dq.flags &= ~DQ.MOD

    def dqsync_all(self) -> None:
        for dq in list(self.hash.values()):
            self.dqsync(dq)

    def getinoquota(self, ip) -> None:
        quota_inos = self.quota_inos()
        for t in range(MAXQUOTAS):
            want = None
            if self.active(t) and ip.number not in quota_inos and ip.din.di_mode != 0:
                want = (t, self._owner(ip, t))
            cur = ip.dquot[t]
            if cur is not None and cur.key == want:
                continue
            ip.dquot[t] = None
            self.dqrele(cur)
            if want is not None:
                ip.dquot[t] = self.dqget(*want)

    def dqrele_inode(self, ip) -> None:
        for t in range(MAXQUOTAS):
            dq = ip.dquot[t]
            ip.dquot[t] = None
            self.dqrele(dq)

    # enforcement

    def _dquots(self, ip) -> list[Dquot]:
        if not self.enabled:
            return []
        self.getinoquota(ip)
        return [dq for dq in ip.dquot if dq is not None]

    def chkdq(self, ip, delta: int, privileged: bool = False) -> None:
        """Charge ``delta`` frags to the owners of ``ip``; EDQUOT on denial."""
        if delta == 0:
            return
        dqs = self._dquots(ip)
        if delta < 0:
            for dq in dqs:
                r = dq.record
                r.dqb_curblocks = max(0, r.dqb_curblocks + delta)
                if not _over(r.dqb_bsoftlimit, r.dqb_curblocks):
                    dq.flags &= ~DQ.BLKS
                dq.flags |= DQ.MOD
            return
        now = self.fs.now()
        for dq in dqs:
            ok, msg = block_decision(dq.record, delta, now, privileged, bool(dq.flags & DQ.FAKE))
            if not ok:
                self._warn(dq, msg)
                raise fserr(errno.EDQUOT, f"{QTYPE_NAMES[dq.type]} {dq.id}: {msg}")
        for dq in dqs:
            r = dq.record
            if (not dq.flags & DQ.FAKE and _over(r.dqb_bsoftlimit, r.dqb_curblocks + delta)
                    and not _over(r.dqb_bsoftlimit, r.dqb_curblocks)):
                r.dqb_btime = now + self.btime[dq.type]
                if not dq.flags & DQ.BLKS:
                    self._warn(dq, "block quota exceeded")
                    dq.flags |= DQ.BLKS
            r.dqb_curblocks += delta
            dq.flags |= DQ.MOD

    def chkiq(self, ip, delta: int, privileged: bool = False) -> None:
        if delta == 0:
            return
        dqs = self._dquots(ip)
        if delta < 0:
            for dq in dqs:
                r = dq.record
                r.dqb_curinodes = max(0, r.dqb_curinodes + delta)
                if not _over(r.dqb_isoftlimit, r.dqb_curinodes):
                    dq.flags &= ~DQ.INODS
                dq.flags |= DQ.MOD
            return
        now = self.fs.now()
        for dq in dqs:
            ok, msg = inode_decision(dq.record, delta, now, privileged, bool(dq.flags & DQ.FAKE))
            if not ok:
                self._warn(dq, msg)
                raise fserr(errno.EDQUOT, f"{QTYPE_NAMES[dq.type]} {dq.id}: {msg}")
        for dq in dqs:
            r = dq.record
            if (not dq.flags & DQ.FAKE and _over(r.dqb_isoftlimit, r.dqb_curinodes + delta)
                    and not _over(r.dqb_isoftlimit, r.dqb_curinodes)):
                r.dqb_itime = now + self.itime[dq.type]
                if not dq.flags & DQ.INODS:
                    self._warn(dq, "inode quota exceeded")
                    dq.flags |= DQ.INODS
            r.dqb_curinodes += delta
            dq.flags |= DQ.MOD

    # administrative

    def getquota(self, type_: int, id_: int) -> QuotaRecord:
        dq = self.dqget(type_, id_)
        try:
            return QuotaRecord(*astuple(dq.record))
        finally:
            self.dqrele(dq)

    def setquota(self, type_: int, id_: int, bsoft: int | None = None, bhard: int | None = None,
                 isoft: int | None = None, ihard: int | None = None) -> QuotaRecord:
        dq = self.dqget(type_, id_)
        try:
            r = dq.record
            now = self.fs.now()
            if bsoft is not None:
                if (bsoft and _over(bsoft, r.dqb_curblocks)
                        and not _over(r.dqb_bsoftlimit, r.dqb_curblocks)):
                    r.dqb_btime = now + self.btime[type_]
                r.dqb_bsoftlimit = bsoft
            if bhard is not None:
                r.dqb_bhardlimit = bhard
            if isoft is not None:
                if (isoft and _over(isoft, r.dqb_curinodes)
                        and not _over(r.dqb_isoftlimit, r.dqb_curinodes)):
                    r.dqb_itime = now + self.itime[type_]
                r.dqb_isoftlimit = isoft
            if ihard is not None:
                r.dqb_ihardlimit = ihard
            if r.unlimited:
                dq.flags |= DQ.FAKE
            else:
                dq.flags &= ~DQ.FAKE
            dq.flags |= DQ.MOD
            return QuotaRecord(*astuple(r))
        finally:
            self.dqrele(dq)

    def shutdown(self) -> None:
        for t in range(MAXQUOTAS):
            self.quota_off(t)


def quotacheck(fs) -> dict[tuple[int, int], tuple[int, int]]:
    """Recount (frags, inodes) per (type, id) by walking every allocated inode."""
    from .fsck import iter_dinodes

    skip = fs.quota.quota_inos()
    usage: dict[tuple[int, int], list[int]] = {}
    for ino, din in iter_dinodes(fs):
        if din.di_mode == 0 or ino in skip or ino < ROOTINO:
            continue
        for t, owner in ((USRQUOTA, din.di_uid), (GRPQUOTA, din.di_gid)):
            u = usage.setdefault((t, owner), [0, 0])
            u[0] += din.di_blocks
            u[1] += 1
    return {k: (v[0], v[1]) for k, v in usage.items()}


def quota_mismatches(fs) -> list[str]:
    """Differences between the recount and the live records of active quota types."""
    counted = quotacheck(fs)
    out = []
    qs = fs.quota
    ids = {k for k in counted} | {k for k in qs.hash}
    for t, id_ in sorted(ids):
        if not qs.active(t):
            continue
        rec = qs.getquota(t, id_)
        want = counted.get((t, id_), (0, 0))
        if (rec.dqb_curblocks, rec.dqb_curinodes) != want:
            out.append(f"{QTYPE_NAMES[t]} {id_}: recorded {rec.dqb_curblocks} frags/"
                       f"{rec.dqb_curinodes} inodes, counted {want[0]}/{want[1]}")
    return out


def rebuild(fs) -> None:
    """Overwrite current usage in every active quota type with the recount."""
    counted = quotacheck(fs)
    qs = fs.quota
    ids = {k for k in counted} | {k for k in qs.hash}
    for t, id_ in ids:
        if not qs.active(t):
            continue
        dq = qs.dqget(t, id_)
        dq.record.dqb_curblocks, dq.record.dqb_curinodes = counted.get((t, id_), (0, 0))
        dq.flags |= DQ.MOD
        qs.dqrele(dq)


__all__ = ["USRQUOTA", "GRPQUOTA", "QuotaRecord", "Dquot", "DQ", "QuotaSystem",
           "block_decision", "inode_decision", "quotacheck", "quota_mismatches", "rebuild",
           "RECSIZE", "MAX_DQ_TIME", "IFMT"]
