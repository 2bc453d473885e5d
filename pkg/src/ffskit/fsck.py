"""fsck-lite: recompute summaries and cross-check maps, inodes, links and quotas."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from . import alloc
from .bufcache import B
from .devimg import LabelError, read_label
from .inode import DEV, chain_blocks, is_short_symlink
from .layout import DINODE_SIZE, IFDIR, IFLNK, IFMT, IFREG, ROOTINO, CgSummary, Dinode
from .namespace import DIRBLKSIZ, parse_chunk


@dataclass(frozen=True)
class Finding:
    kind: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.detail}"


def iter_dinodes(fs):
    """(ino, dinode) for every inode slot; in-core copies win over the disk."""
    sb = fs.sb
    per = sb.fs_inopb
    for c in range(sb.fs_ncg):
        for blk in range(sb.fs_ipg // per):
            first = c * sb.fs_ipg + blk * per
            bp = fs.cache.bread(DEV, sb.ino_to_fsba(first), sb.fs_bsize)
            raw = bytes(bp.data[:sb.fs_bsize])
            fs.cache.brelse(bp)
            for i in range(per):
                ino = first + i
                ip = fs.ihash.get(ino)
                yield ino, (ip.din if ip is not None else Dinode.parse(raw, i * DINODE_SIZE))


def _metadata_ranges(sb, c: int) -> list[tuple[int, int]]:
    """Frag ranges (absolute, half-open) that never hold file data."""
    base = sb.cgbase(c)
    lo = base if c == 0 else sb.cgsblock(c)
    hi = sb.cgdmin(c)
    if c == 0:
        hi += sb.numfrags(sb.fs_cssize)
    return [(lo, hi)]


def _read_dir(fs, din: Dinode, ino: int):
    """Directory entries as (name, ino) plus any chunk errors."""
    sb = fs.sb
    entries, errors = [], []
    if din.di_size % DIRBLKSIZ:
        errors.append(f"directory {ino} size {din.di_size} not a chunk multiple")
    nblk = sb.lblkno(din.di_size + sb.fs_bsize - 1)
    for lbn in range(nblk):
        addr = din.di_db[lbn] if lbn < len(din.di_db) else 0
        if lbn >= len(din.di_db):
            from .inode import bmap, iget, iput
            ip = iget(fs, ino)
            try:
                addr = bmap(ip, lbn)
            finally:
                iput(ip)
            addr = max(addr, 0)
        size = sb.blksize(din.di_size, lbn)
        if addr == 0:
            errors.append(f"directory {ino} has a hole at block {lbn}")
            continue
        data = _read_file_block(fs, ino, lbn, addr, size)
        for base in range(0, min(size, din.di_size - sb.lblktosize(lbn)) // DIRBLKSIZ * DIRBLKSIZ,
                          DIRBLKSIZ):
            try:
                for e in parse_chunk(data, base):
                    if e.ino:
                        entries.append((e.name, e.ino))
            except OSError as ex:
                errors.append(f"directory {ino} block {lbn}: {ex.strerror}")
    return entries, errors


def _read_file_block(fs, ino: int, lbn: int, addr: int, size: int) -> bytes:
    # a cached (possibly dirty) file buffer is newer than the disk
    bp = fs.cache.incore(ino, lbn)
    if bp is not None and not bp.flags & (B.BUSY | B.INVALID):
        bp = fs.cache.bread(ino, lbn, size)
        data = bytes(bp.data[:size])
        fs.cache.brelse(bp)
        return data
    return fs.dev.read(fs.sb.fsbtodb(addr), size // 512)


def label_warnings(fs) -> list[Finding]:
    """Partitions that do not start on a cylinder boundary; advisory only."""
    dev = fs.dev
    img = getattr(dev, "img", None)
    if img is None:
        return []
    try:
        lab = read_label(img)
    except LabelError:
        return []
    spc = lab.d_secpercyl or lab.d_nsectors * lab.d_ntracks
    if spc and dev.offset % spc:
        return [Finding("warning", f"partition at sector {dev.offset} is not on a cylinder "
                        f"boundary ({spc} sectors/cylinder)")]
    return []


def fsck_lite(fs, fix: bool = False) -> list[Finding]:
    """Every inconsistency found; ``fix`` rewrites the summary counts only."""
    sb = fs.sb
    out: list[Finding] = label_warnings(fs)
    add = lambda kind, detail: out.append(Finding(kind, detail))

    # pass 1: inodes and their blocks
    owner: dict[int, int] = {}
    dinodes: dict[int, Dinode] = {}
    cgs = []
    for c in range(sb.fs_ncg):
        try:
            bp, cg = fs.getcg(c)
        except OSError as e:
            add("cg", f"group {c}: {e.strerror}")
            cgs.append(None)
            continue
        fs.relcg(bp)
        cgs.append(cg)
    for ino, din in iter_dinodes(fs):
        cg = cgs[sb.ino_to_cg(ino)]
        inmap = cg is not None and cg.isinoused(ino % sb.fs_ipg)
        if ino < ROOTINO:
            continue
        if din.di_mode == 0:
            if inmap:
                add("inode map", f"inode {ino} marked used but unallocated")
            continue
        if not inmap:
            add("inode map", f"inode {ino} allocated but marked free")
        dinodes[ino] = din
        if is_short_symlink(fs, din):
            continue
        try:
            blocks = chain_blocks(fs, din)
        except OSError as e:
            add("blocks", f"inode {ino}: {e.strerror}")
            continue
        total = 0
        for addr, size in blocks:
            n = sb.numfrags(size)
            total += n
            if addr < 0 or addr + n > sb.fs_size:
                add("blocks", f"inode {ino}: block {addr} out of range")
                continue
            for f in range(addr, addr + n):
                if f in owner:
                    add("blocks", f"frag {f} claimed by inodes {owner[f]} and {ino}")
                owner[f] = ino
                c = sb.dtog(f)
                if cgs[c] is not None and cgs[c].isfree(sb.dtogd(f)):
                    add("blocks", f"inode {ino}: frag {f} in use but marked free")
        if total != din.di_blocks:
            add("di_blocks", f"inode {ino}: di_blocks {din.di_blocks}, counted {total}")

    # pass 2: unreferenced allocations and summaries
    cstotal = CgSummary()
    for c, cg in enumerate(cgs):
        if cg is None:
            continue
        meta = _metadata_ranges(sb, c)
        base = sb.cgbase(c)
        for rel in range(sb.fs_fpg):
            if cg.isfree(rel):
                continue
            f = base + rel
            if f in owner or any(lo <= f < hi for lo, hi in meta):
                continue
            add("blocks", f"frag {f} allocated but unreferenced")
        nbfree, nffree, frsum = alloc.cg_recount(sb, cg)
        nifree = sum(1 for i in range(sb.fs_ipg) if not cg.isinoused(i))
        ndir = sum(1 for ino, d in dinodes.items()
                   if sb.ino_to_cg(ino) == c and d.di_mode & IFMT == IFDIR)
        want = CgSummary(ndir, nbfree, nifree, nffree)
        if cg.cg_cs.astuple() != want.astuple():
            add("summary", f"group {c}: header {cg.cg_cs.astuple()} recount {want.astuple()}")
        if list(cg.cg_frsum) != frsum:
            add("summary", f"group {c}: frsum {list(cg.cg_frsum)} recount {frsum}")
        if fs.cs[c].astuple() != want.astuple():
            add("summary", f"group {c}: summary area {fs.cs[c].astuple()} recount "
                f"{want.astuple()}")
        if fix and (cg.cg_cs.astuple() != want.astuple() or list(cg.cg_frsum) != frsum
                    or fs.cs[c].astuple() != want.astuple()):
            bp, live = fs.getcg(c)
            live.cg_cs = want.copy()
            live.cg_frsum = list(frsum)
            fs.putcg(bp, live)
            fs.cs[c] = want.copy()
        cstotal.add(want)
    if sb.fs_cstotal.astuple() != cstotal.astuple():
        add("summary", f"superblock totals {sb.fs_cstotal.astuple()} recount "
            f"{cstotal.astuple()}")
        if fix:
            sb.fs_cstotal = cstotal.copy()
            sb.fs_fmod = 1

    # pass 3: directories and link counts
    refs: Counter = Counter()
    for ino, din in sorted(dinodes.items()):
        if din.di_mode & IFMT != IFDIR:
            continue
        entries, errors = _read_dir(fs, din, ino)
        for e in errors:
            add("directory", e)
        names = {}
        for name, target in entries:
            refs[target] += 1
            names[name] = target
            if target not in dinodes:
                add("directory", f"directory {ino} entry {name!r} names free inode {target}")
        if names.get(b".") != ino:
            add("directory", f"directory {ino}: bad '.' entry")
        if b".." not in names:
            add("directory", f"directory {ino}: missing '..'")
    for ino, din in dinodes.items():
        if din.di_nlink != refs[ino]:
            add("link count", f"inode {ino}: di_nlink {din.di_nlink}, {refs[ino]} references")
        if din.di_mode & IFMT not in (IFDIR, IFREG, IFLNK):
            add("inode", f"inode {ino}: unknown type 0{din.di_mode & IFMT:o}")

    # pass 4: quotas
    if fs.quota.enabled:
        from .quota import quota_mismatches
        for m in quota_mismatches(fs):
            add("quota", m)

    if fix:
        fs.sync()
    return out


__all__ = ["Finding", "fsck_lite", "iter_dinodes", "label_warnings"]
