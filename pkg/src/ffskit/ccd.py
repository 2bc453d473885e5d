"""Concatenated disk: interleave groups over unequal components.

Blocks are 512-byte sectors throughout.  Components are interleaved in
groups: every component up to the size of the smallest one, then the
remaining components up to the next smallest, and so on.  ``ileave == 0``
concatenates the components end to end instead.
"""

from __future__ import annotations

import os
from bisect import bisect_right
from dataclasses import dataclass, field

from .devimg import DEV_BSIZE, DiskImage, DiskLabel, default_label, open_image, rw_sectors


class CcdError(ValueError):
    pass


@dataclass
class Component:
    image: DiskImage | None
    size: int
    name: str = ""


@dataclass
class CcdConfig:
    components: list[Component]
    ileave: int = 0
    flags: int = 0

    def __post_init__(self):
        if not self.components:
            raise CcdError("a ccd needs at least one component")
        if self.ileave < 0:
            raise CcdError(f"negative interleave {self.ileave}")
        for i, c in enumerate(self.components):
            if c.size <= 0:
                raise CcdError(f"component {i} has size {c.size}")

    @classmethod
    def from_sizes(cls, sizes, ileave: int = 0) -> "CcdConfig":
        return cls([Component(None, s, str(i)) for i, s in enumerate(sizes)], ileave)

    def usable_sizes(self) -> list[int]:
        # components shrink to a whole number of interleave units
        if self.ileave == 0:
            return [c.size for c in self.components]
        return [c.size - c.size % self.ileave for c in self.components]


@dataclass
class Row:
    ndisk: int
    startblk: int
    startoff: int
    index: list[int] = field(default_factory=list)

    def astuple(self):
        return (self.ndisk, self.startblk, self.startoff, list(self.index))


@dataclass
class InterleaveTable:
    rows: list[Row]
    ileave: int
    total: int

    def __post_init__(self):
        self._starts = [r.startblk for r in self.rows]

    def text(self) -> str:
        lines = ["ndisk\tstartblk\tstartoff\tdev"]
        for r in self.rows:
            lines.append(f"{r.ndisk}\t{r.startblk}\t{r.startoff}\t"
                         + ", ".join(str(i) for i in r.index))
        lines.append("0\t-\t-\t-")
        return "\n".join(lines) + "\n"


def build_table(cfg: CcdConfig) -> InterleaveTable:
    sizes = cfg.usable_sizes()
    for i, s in enumerate(sizes):
        if s <= 0:
            raise CcdError(f"component {i} is smaller than the interleave {cfg.ileave}")
    rows: list[Row] = []
    if cfg.ileave == 0:
        bn = 0
        for i, s in enumerate(sizes):
            rows.append(Row(1, bn, 0, [i]))
            bn += s
        return InterleaveTable(rows, 0, bn)
    bn = done = 0
    for cut in sorted(set(sizes)):
        members = [i for i, s in enumerate(sizes) if s >= cut]
        rows.append(Row(len(members), bn, done, members))
        bn += len(members) * (cut - done)
        done = cut
    return InterleaveTable(rows, cfg.ileave, bn)


def map_block(table: InterleaveTable, lblk: int) -> tuple[int, int]:
    """Logical block to (component, component block)."""
    if not 0 <= lblk < table.total:
        raise CcdError(f"block {lblk} outside 0..{table.total}")
    row = table.rows[bisect_right(table._starts, lblk) - 1]
    idx = lblk - row.startblk
    if table.ileave == 0:
        return row.index[0], row.startoff + idx
    il = table.ileave
    comp = row.index[(idx // il) % row.ndisk]
    return comp, row.startoff + idx // (row.ndisk * il) * il + idx % il


def fragments(table: InterleaveTable, start: int, nblocks: int) -> list[tuple[int, int, int, int]]:
    """Split a request into (logical start, component, offset, count) runs."""
    out: list[list[int]] = []
    for b in range(start, start + nblocks):
        comp, off = map_block(table, b)
        if out and out[-1][1] == comp and out[-1][2] + out[-1][3] == off:
            out[-1][3] += 1
        else:
            out.append([b, comp, off, 1])
    return [tuple(f) for f in out]


class CcdVolume:
    """A configured ccd: the table plus the component images."""

    def __init__(self, cfg: CcdConfig):
        self.cfg = cfg
        self.table = build_table(cfg)
        self.nfragments = 0

    @property
    def size(self) -> int:
        return self.table.total

    def default_label(self) -> DiskLabel:
        return default_label(self.size)

    def io(self, start: int, nbytes: int, write: bool = False, buf=None) -> bytes | None:
        if nbytes % DEV_BSIZE:
            raise CcdError(f"transfer of {nbytes} bytes is not a whole number of blocks")
        n = nbytes // DEV_BSIZE
        if start < 0 or start + n > self.size:
            raise CcdError(f"blocks {start}+{n} outside 0..{self.size}")
        if write and (buf is None or len(buf) != nbytes):
            raise CcdError(f"write buffer must be {nbytes} bytes")
        out = bytearray(nbytes) if not write else None
        for lb, comp, off, cnt in fragments(self.table, start, n):
            img = self.cfg.components[comp].image
            if img is None:
                raise CcdError(f"component {comp} has no backing image")
            lo = (lb - start) * DEV_BSIZE
            hi = lo + cnt * DEV_BSIZE
            self.nfragments += 1
            if write:
                rw_sectors(img, off, cnt, True, bytes(buf[lo:hi]))
            else:
                out[lo:hi] = rw_sectors(img, off, cnt, False)
        return bytes(out) if out is not None else None

    # PartitionDev-compatible surface so a filesystem can live on the volume
    def read(self, sector: int, count: int) -> bytes:
        return self.io(sector, count * DEV_BSIZE)

    def write(self, sector: int, data: bytes) -> None:
        self.io(sector, len(data), True, data)

    def close(self) -> None:
        for c in self.cfg.components:
            if c.image is not None:
                c.image.close()


def ccd_io(vol: CcdVolume, start_lblk: int, byte_len: int, write: bool = False, buf=None):
    return vol.io(start_lblk, byte_len, write, buf)


def parse_config(text: str, base: str = ".") -> tuple[int, list[tuple[str, int | None]]]:
    """``ileave N`` then one ``path [size]`` per line; ``#`` starts a comment."""
    ileave = 0
    comps = []
    for lineno, line in enumerate(text.splitlines(), 1):
        words = line.split("#", 1)[0].split()
        if not words:
            continue
        try:
            if words[0] == "ileave":
                ileave = int(words[1])
            elif len(words) in (1, 2):
                size = int(words[1]) if len(words) == 2 else None
                comps.append((os.path.join(base, words[0]), size))
            else:
                raise ValueError
        except (ValueError, IndexError):
            raise CcdError(f"line {lineno}: cannot parse {line.strip()!r}") from None
    return ileave, comps


def load_config(path, open_images: bool = True) -> CcdConfig:
    with open(path) as fh:
        ileave, comps = parse_config(fh.read(), os.path.dirname(os.fspath(path)))
    out = []
    for p, size in comps:
        img = open_image(p) if open_images else None
        if size is None:
            if img is None:
                size = os.path.getsize(p) // DEV_BSIZE
            else:
                size = img.total_sectors
        out.append(Component(img, size, p))
    return CcdConfig(out, ileave)


__all__ = ["CcdError", "Component", "CcdConfig", "Row", "InterleaveTable", "build_table",
           "map_block", "fragments", "CcdVolume", "ccd_io", "parse_config", "load_config"]
