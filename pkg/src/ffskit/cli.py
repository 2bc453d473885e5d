"""Command-line tools: mkfs, dumpfs, label, fsck-lite, ccdmap and fsdb.

Images are addressed as ``path[:letter]`` (partition ``a`` by default).
Exit status is 0 on success, 1 for usage errors, 2 for bad on-disk data
and 3 for I/O failures.
"""

from __future__ import annotations

import argparse
import errno
import inspect
import shlex
import sys
from dataclasses import astuple, fields

from . import __version__
from .ccd import CcdError, build_table, load_config
from .devimg import (LabelError, Panic, PartitionDev, label_text, open_image, parse_label_text,
                     read_label, write_label)
from .fs import Filesystem
from .fsck import fsck_lite
from .layout import FormatError, CylGroup, Superblock, SBOFF, SBSIZE
from .mkfs import MkfsError, MkfsParams, mkfs_image
from .namespace import DT_DIR, DT_LNK
from .quota import GRPQUOTA, USRQUOTA

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: {message}\n")


def split_target(target: str) -> tuple[str, str]:
    """``disk.img:b`` -> ("disk.img", "b"); a bare path means partition a."""
    path, sep, letter = target.rpartition(":")
    if sep and len(letter) == 1 and letter.isalpha():
        return path, letter.lower()
    return target, "a"


def errname(e: OSError) -> str:
    name = errno.errorcode.get(e.errno, "EIO") if e.errno else "EIO"
    return f"{name} ({e.strerror or e})"


def _open_dev(target: str):
    path, letter = split_target(target)
    img = open_image(path)
    try:
        return img, PartitionDev.open(img, letter)
    except Exception:
        img.close()
        raise


def _read_sb(dev: PartitionDev) -> Superblock:
    return Superblock.parse(dev.read(SBOFF // 512, SBSIZE // 512))


# mkfs

def cmd_mkfs(a) -> int:
    path, letter = split_target(a.image)
    p = MkfsParams(bsize=a.bsize, fsize=a.fsize, minfree=a.minfree, density=a.density,
                   optim=a.optim, cpg=a.cpg, seed=a.seed)
    sb = mkfs_image(path, letter, p, create_sectors=a.size)
    t = sb.fs_cstotal
    print(f"{path}:{letter}: {sb.fs_size * sb.fs_fsize // 1024} KiB in {sb.fs_ncg} cyl groups "
          f"({sb.fs_cpg} c/g, {sb.fs_fpg * sb.fs_fsize / 1048576:.2f} MiB/g, "
          f"{sb.fs_ipg} i/g)")
    print(f"free: {t.cs_nbfree} blocks, {t.cs_nffree} frags, {t.cs_nifree} inodes")
    return EXIT_OK


# dumpfs

def _fmt(v) -> str:
    if isinstance(v, bytes):
        return repr(v.rstrip(b"\0").decode("latin-1"))
    return str(v)


def dumpfs_text(sb: Superblock, cgs: list[tuple[int, CylGroup]]) -> str:
    out = []
    for f in fields(sb):
        v = getattr(sb, f.name)
        if f.name == "fs_cstotal":
            out.append("fs_cstotal ndir %d nbfree %d nifree %d nffree %d" % v.astuple())
        elif f.name == "fs_magic":
            out.append(f"fs_magic 0x{v:x}")
        elif not f.name.startswith(("fs_unused", "fs_sparecon", "fs_firstfield")):
            out.append(f"{f.name} {_fmt(v)}")
    for c, cg in cgs:
        out.append("")
        out.append(f"cg {c}")
        out.append(f"  cgx {cg.cg_cgx} ncyl {cg.cg_ncyl} niblk {cg.cg_niblk} ndblk {cg.cg_ndblk}")
        out.append("  ndir %d nbfree %d nifree %d nffree %d" % cg.cg_cs.astuple())
        out.append(f"  rotor {cg.cg_rotor} frotor {cg.cg_frotor} irotor {cg.cg_irotor}")
        out.append("  frsum " + " ".join(str(x) for x in cg.cg_frsum[1:]))
    return "\n".join(out) + "\n"


def cmd_dumpfs(a) -> int:
    img, dev = _open_dev(a.image)
    try:
        sb = _read_sb(dev)
        which = [a.cg] if a.cg is not None else range(sb.fs_ncg)
        cgs = []
        for c in which:
            if not 0 <= c < sb.fs_ncg:
                raise UsageError(f"cylinder group {c} out of range 0..{sb.fs_ncg - 1}")
            raw = dev.read(sb.fsbtodb(sb.cgtod(c)), sb.fs_cgsize // 512)
            cgs.append((c, CylGroup.parse(raw)))
        if a.cg is not None:
            sys.stdout.write(dumpfs_text(sb, cgs).split("\n\n", 1)[1])
        else:
            sys.stdout.write(dumpfs_text(sb, cgs))
    finally:
        img.close()
    return EXIT_OK


# label

def cmd_label(a) -> int:
    path, _ = split_target(a.image)
    with open_image(path) as img:
        if a.edit:
            with open(a.edit) as fh:
                lab = parse_label_text(fh.read())
            lab.validate()
            write_label(img, lab)
            img.flush()
        sys.stdout.write(label_text(read_label(img)))
    return EXIT_OK


# fsck-lite

def cmd_fsck(a) -> int:
    path, letter = split_target(a.image)
    with Filesystem.mount(path, letter, readonly=not a.fix) as fs:
        found = fsck_lite(fs, fix=a.fix)
        for f in found:
            print(f)
        found = [f for f in found if f.kind != "warning"]
        remaining = [f for f in fsck_lite(fs) if f.kind != "warning"] if a.fix and found else found
        if a.fix and found:
            print(f"{len(found)} findings, {len(found) - len(remaining)} fixed")
        else:
            print(f"{len(found)} findings")
    return EXIT_DATA if remaining else EXIT_OK


# ccdmap

def cmd_ccdmap(a) -> int:
    cfg = load_config(a.config, open_images=False)
    table = build_table(cfg)
    sys.stdout.write(table.text())
    if a.verbose:
        for i, c in enumerate(cfg.components):
            print(f"# {i} {c.name} {c.size}")
        print(f"# total {table.total}")
    return EXIT_OK


# fsdb

_QTYPES = {"user": USRQUOTA, "usr": USRQUOTA, "group": GRPQUOTA, "grp": GRPQUOTA}


class Fsdb:
    """Line-oriented shell over a mounted filesystem."""

    def __init__(self, fs: Filesystem, out=None):
        self.fs = fs
        self.out = out or sys.stdout
        self.handles: dict[int, object] = {}
        self.nexth = 1
        self.errors = 0

    def say(self, *parts) -> None:
        print(*parts, file=self.out)

    def run(self, lines) -> int:
        for line in lines:
            if not self.execute(line):
                break
        return self.errors

    def execute(self, line: str) -> bool:
        try:
            words = shlex.split(line, comments=True)
        except ValueError as e:
            self._fail(line, f"parse error: {e}")
            return True
        if not words:
            return True
        cmd, args = words[0], words[1:]
        if cmd in ("quit", "exit"):
            return False
        fn = getattr(self, "do_" + cmd.replace("-", "_"), None)
        if fn is None:
            self._fail(cmd, "unknown command")
            return True
        try:
            inspect.signature(fn).bind(*args)
        except TypeError:
            self._fail(cmd, "wrong number of arguments")
            return True
        try:
            fn(*args)
        except OSError as e:
            self._fail(cmd, errname(e))
        except (ValueError, KeyError) as e:
            self._fail(cmd, str(e))
        return True

    def _fail(self, cmd, msg) -> None:
        self.errors += 1
        print(f"fsdb: {cmd}: {msg}", file=sys.stderr)

    def do_help(self):
        names = sorted(n[3:] for n in dir(self) if n.startswith("do_"))
        self.say(" ".join(names))

    def do_ls(self, path="/"):
        for name, ino, dtype in self.fs.listdir(path):
            self.say(f"{ino:8d} {'d' if dtype == DT_DIR else 'l' if dtype == DT_LNK else '-'} "
                     f"{name.decode(errors='replace')}")

    def do_stat(self, path):
        st = self.fs.stat(path, follow=False)
        for f in fields(st):
            v = getattr(st, f.name)
            self.say(f"{f.name} {oct(v) if f.name == 'st_mode' else v}")

    def do_cat(self, path):
        data = self.fs.read_file(path)
        out = getattr(self.out, "buffer", None)
        if out is not None:
            self.out.flush()
            out.write(data)
            out.flush()
        else:
            self.out.write(data.decode("latin-1"))

    def do_put(self, local, path):
        with open(local, "rb") as fh:
            data = fh.read()
        ip = self.fs.open(path, create=True)
        try:
            self.fs.truncate(ip, 0)
            self.fs.write(ip, 0, data)
        finally:
            self.fs.iput(ip)

    def do_get(self, path, local):
        with open(local, "wb") as fh:
            fh.write(self.fs.read_file(path))

    def do_mkdir(self, path):
        self.fs.mkdir(path)

    def do_rm(self, path):
        self.fs.unlink(path)

    def do_rmdir(self, path):
        self.fs.rmdir(path)

    def do_ln(self, *args):
        if args and args[0] == "-s":
            target, path = args[1:]
            self.fs.symlink(target, path)
        else:
            target, path = args
            self.fs.link(target, path)

    def do_readlink(self, path):
        self.say(self.fs.readlink(path).decode(errors="replace"))

    def do_mv(self, src, dst):
        self.fs.rename(src, dst)

    def do_truncate(self, path, length):
        self.fs.truncate_path(path, int(length))

    def do_sync(self):
        self.fs.sync()

    def do_open(self, path):
        ip = self.fs.lookup(path)
        h = self.nexth
        self.nexth += 1
        self.handles[h] = ip
        self.say(f"handle {h} inode {ip.number}")

    def do_close(self, h):
        ip = self.handles.pop(int(h))
        self.fs.iput(ip)

    def do_df(self):
        t = self.fs.sb.fs_cstotal
        self.say(f"nbfree {t.cs_nbfree} nffree {t.cs_nffree} nifree {t.cs_nifree} "
                 f"ndir {t.cs_ndir}")

    def do_cachestats(self):
        c = self.fs.cache.stats
        self.say("buffers " + " ".join(f"{f.name} {getattr(c, f.name)}" for f in fields(c)))
        n = self.fs.ncache.stats
        self.say("names " + " ".join(f"{f.name} {getattr(n, f.name)}" for f in fields(n)))
        v = self.fs.vnodes.stats
        self.say("vnodes " + " ".join(f"{f.name} {getattr(v, f.name)}" for f in fields(v)))

    def do_quotaon(self, kind, path):
        self.fs.quota.quota_on(_QTYPES[kind], path)

    def do_quotaoff(self, kind):
        self.fs.quota.quota_off(_QTYPES[kind])

    def do_getquota(self, kind, id_):
        r = self.fs.quota.getquota(_QTYPES[kind], int(id_))
        self.say(" ".join(f"{f.name} {v}" for f, v in zip(fields(r), astuple(r))))

    def do_setquota(self, kind, id_, bsoft, bhard, isoft, ihard):
        self.fs.quota.setquota(_QTYPES[kind], int(id_), int(bsoft), int(bhard),
                               int(isoft), int(ihard))

    def close(self) -> None:
        for ip in self.handles.values():
            self.fs.iput(ip)
        self.handles.clear()


def cmd_fsdb(a) -> int:
    path, letter = split_target(a.image)
    src = open(a.script) if a.script else sys.stdin
    try:
        with Filesystem.mount(path, letter, readonly=a.readonly) as fs:
            db = Fsdb(fs)
            try:
                if a.command:
                    for c in a.command:
                        db.execute(c)
                else:
                    db.run(src)
            finally:
                db.close()
    finally:
        if src is not sys.stdin:
            src.close()
    return EXIT_DATA if db.errors else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="ffskit", description="Fast filesystem image tools.")
    top.add_argument("--version", action="version", version=__version__)
    sub = top.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("mkfs", help="build an empty filesystem")
    p.add_argument("image")
    p.add_argument("-b", "--bsize", type=int, default=8192)
    p.add_argument("-f", "--fsize", type=int, default=1024)
    p.add_argument("-m", "--minfree", type=int, default=10)
    p.add_argument("-i", "--density", type=int, default=2048)
    p.add_argument("-o", "--optim", choices=["time", "space"], default="time")
    p.add_argument("-c", "--cpg", type=int)
    p.add_argument("-s", "--size", type=int, help="create the image with this many sectors")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_mkfs)

    p = sub.add_parser("dumpfs", help="print superblock and cylinder groups")
    p.add_argument("image")
    p.add_argument("--cg", type=int)
    p.set_defaults(fn=cmd_dumpfs)

    p = sub.add_parser("label", help="show or replace the disk label")
    p.add_argument("image")
    p.add_argument("--edit", metavar="FILE", help="install the label described in FILE")
    p.set_defaults(fn=cmd_label)

    p = sub.add_parser("fsck-lite", help="check summaries, maps, links and quotas")
    p.add_argument("image")
    p.add_argument("--fix", action="store_true", help="rewrite summary counts")
    p.set_defaults(fn=cmd_fsck)

    p = sub.add_parser("ccdmap", help="print a ccd interleave table")
    p.add_argument("config")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(fn=cmd_ccdmap)

    p = sub.add_parser("fsdb", help="line-oriented filesystem shell (reads stdin)")
    p.add_argument("image")
    p.add_argument("-c", "--command", action="append", help="run one command (repeatable)")
    p.add_argument("-f", "--script")
    p.add_argument("-r", "--readonly", action="store_true")
    p.set_defaults(fn=cmd_fsdb)
    return top


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    prog = f"ffskit {a.cmd}"
    try:
        return a.fn(a)
    except UsageError as e:
        print(f"{prog}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, LabelError, MkfsError, CcdError, Panic) as e:
        print(f"{prog}: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"{prog}: {errname(e)}", file=sys.stderr)
        # host-side failures (opening the image, short reads) are I/O errors
        if e.filename is not None or e.errno in (None, errno.EIO):
            return EXIT_IO
        return EXIT_DATA
    except ValueError as e:
        print(f"{prog}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
