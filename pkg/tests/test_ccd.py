import os
import random

import pytest
from hypothesis import given, settings, strategies as st

from ffskit.ccd import (CcdConfig, CcdError, CcdVolume, Component, build_table, ccd_io, fragments,
                        load_config, map_block, parse_config)
from ffskit.devimg import DEV_BSIZE, open_image
from ffskit.fs import Filesystem
from ffskit.mkfs import MkfsParams, mkfs_dev
from fsmodel import Fuzzer


def layout_oracle(sizes, ileave):
    """Logical order of (component, offset) built by dealing out interleave units."""
    if ileave == 0:
        return [(i, o) for i, s in enumerate(sizes) for o in range(s)]
    usable = [s - s % ileave for s in sizes]
    out = []
    for base in range(0, max(usable), ileave):
        for i, u in enumerate(usable):
            if base < u:
                out.extend((i, base + k) for k in range(ileave))
    return out


def test_three_component_table():
    t = build_table(CcdConfig.from_sizes([5, 3, 7], ileave=1))
    assert [r.astuple() for r in t.rows] == [
        (3, 0, 0, [0, 1, 2]),
        (2, 9, 3, [0, 2]),
        (1, 13, 5, [2]),
    ]
    assert t.total == 15
    assert map_block(t, 13) == (2, 5)
    assert [map_block(t, b) for b in range(15)] == layout_oracle([5, 3, 7], 1)


def test_table_text_has_sentinel():
    t = build_table(CcdConfig.from_sizes([5, 3, 7], ileave=1))
    lines = t.text().splitlines()
    assert lines[1] == "3\t0\t0\t0, 1, 2"
    assert lines[-1] == "0\t-\t-\t-"


def test_components_trimmed_to_interleave():
    cfg = CcdConfig.from_sizes([10, 7, 16], ileave=4)
    assert cfg.usable_sizes() == [8, 4, 16]
    t = build_table(cfg)
    assert t.total == 28
    assert [map_block(t, b) for b in range(t.total)] == layout_oracle([10, 7, 16], 4)
    with pytest.raises(CcdError, match="smaller than the interleave"):
        build_table(CcdConfig.from_sizes([10, 3], ileave=4))


def test_serial_concatenation():
    t = build_table(CcdConfig.from_sizes([4, 2, 3], ileave=0))
    assert [r.astuple() for r in t.rows] == [(1, 0, 0, [0]), (1, 4, 0, [1]), (1, 6, 0, [2])]
    assert [map_block(t, b) for b in range(9)] == layout_oracle([4, 2, 3], 0)


def test_config_validation():
    with pytest.raises(CcdError):
        CcdConfig([])
    with pytest.raises(CcdError):
        CcdConfig.from_sizes([4], ileave=-1)
    with pytest.raises(CcdError):
        CcdConfig.from_sizes([4, 0])
    t = build_table(CcdConfig.from_sizes([4]))
    for bad in (-1, 4):
        with pytest.raises(CcdError):
            map_block(t, bad)


sizes_st = st.lists(st.integers(1, 40), min_size=1, max_size=5)


@settings(max_examples=400)
@given(sizes=sizes_st, ileave=st.integers(0, 6))
def test_mapping_is_a_bijection(sizes, ileave):
    cfg = CcdConfig.from_sizes(sizes, ileave)
    usable = cfg.usable_sizes()
    if min(usable) <= 0:
        with pytest.raises(CcdError):
            build_table(cfg)
        return
    t = build_table(cfg)
    assert t.total == sum(usable)
    mapped = [map_block(t, b) for b in range(t.total)]
    assert mapped == layout_oracle(sizes, ileave)
    assert len(set(mapped)) == t.total
    assert all(0 <= off < usable[c] for c, off in mapped)


@settings(max_examples=200)
@given(sizes=sizes_st, ileave=st.integers(1, 6), data=st.data())
def test_fragments_cover_request(sizes, ileave, data):
    cfg = CcdConfig.from_sizes([s + ileave for s in sizes], ileave)
    t = build_table(cfg)
    start = data.draw(st.integers(0, t.total - 1))
    n = data.draw(st.integers(1, t.total - start))
    frags = fragments(t, start, n)
    assert sum(f[3] for f in frags) == n
    b = start
    for lb, comp, off, cnt in frags:
        assert lb == b
        assert [map_block(t, x) for x in range(lb, lb + cnt)] == [(comp, off + k) for k in range(cnt)]
        b += cnt
    # adjacent fragments never merge into one contiguous run
    for f, g in zip(frags, frags[1:]):
        assert not (f[1] == g[1] and f[2] + f[3] == g[2])


@pytest.fixture
def volume(tmp_path):
    sizes = [96, 64, 128]
    comps = [Component(open_image(tmp_path / f"c{i}.img", create_sectors=s), s, f"c{i}")
             for i, s in enumerate(sizes)]
    vol = CcdVolume(CcdConfig(comps, ileave=8))
    yield vol
    vol.close()


def test_io_against_shadow(volume, tmp_path):
    rng = random.Random(5)
    shadow = bytearray(volume.size * DEV_BSIZE)
    for _ in range(300):
        start = rng.randrange(volume.size)
        n = rng.randint(1, min(40, volume.size - start))
        if rng.random() < 0.5:
            buf = rng.randbytes(n * DEV_BSIZE)
            ccd_io(volume, start, len(buf), True, buf)
            shadow[start * DEV_BSIZE:(start + n) * DEV_BSIZE] = buf
        else:
            got = ccd_io(volume, start, n * DEV_BSIZE)
            assert got == bytes(shadow[start * DEV_BSIZE:(start + n) * DEV_BSIZE])
    for c in volume.cfg.components:
        c.image.flush()
    # each sector really lives where the table says it does
    for lb in rng.sample(range(volume.size), 30):
        comp, off = map_block(volume.table, lb)
        raw = (tmp_path / f"c{comp}.img").read_bytes()
        assert raw[off * DEV_BSIZE:(off + 1) * DEV_BSIZE] == shadow[lb * DEV_BSIZE:(lb + 1) * DEV_BSIZE]


def test_io_errors(volume):
    with pytest.raises(CcdError, match="whole number"):
        volume.io(0, 100)
    with pytest.raises(CcdError, match="outside"):
        volume.io(volume.size, DEV_BSIZE)
    with pytest.raises(CcdError, match="write buffer"):
        volume.io(0, DEV_BSIZE, write=True, buf=b"x")
    vol = CcdVolume(CcdConfig.from_sizes([8]))
    with pytest.raises(CcdError, match="no backing image"):
        vol.read(0, 1)


def test_large_transfer_splits_per_interleave(volume):
    before = volume.nfragments
    volume.read(0, 24)
    assert volume.nfragments - before == 3


def test_parse_config(tmp_path):
    text = "# striped pair\nileave 16\n\na.img 2048   # first\nsub/b.img\n"
    assert parse_config(text, "/base") == (16, [("/base/a.img", 2048), ("/base/sub/b.img", None)])
    for bad in ("ileave\n", "ileave x\n", "a b c\n", "a.img size\n"):
        with pytest.raises(CcdError, match="line 1"):
            parse_config(bad)


def test_load_config_sizes_from_images(tmp_path):
    for name, n in (("a.img", 64), ("b.img", 48)):
        open_image(tmp_path / name, create_sectors=n).close()
    conf = tmp_path / "ccd.conf"
    conf.write_text("ileave 4\na.img\nb.img 40\n")
    cfg = load_config(conf, open_images=False)
    assert [c.size for c in cfg.components] == [64, 40]
    assert cfg.components[0].name == os.path.join(str(tmp_path), "a.img")
    assert build_table(cfg).total == 104


def test_filesystem_on_volume(tmp_path):
    sizes = [12288, 8192, 16384]
    comps = [Component(open_image(tmp_path / f"d{i}.img", create_sectors=s), s, f"d{i}")
             for i, s in enumerate(sizes)]
    vol = CcdVolume(CcdConfig(comps, ileave=16))
    mkfs_dev(vol, MkfsParams(seed=3), clock=lambda: 1_000_000_000)
    fs = Filesystem.mount_dev(vol, clock=lambda: 1_000_000_000)
    fz = Fuzzer(fs, seed=4, max_file=60_000, far_offsets=False)
    for _ in range(600):
        fz.step()
    fs.unmount()
    assert vol.nfragments > 0
    fs = Filesystem.mount_dev(vol, clock=lambda: 1_000_000_000)
    fz.fs = fs
    fz.verify()
    fs.check_invariants()
    fs.unmount()
    vol.close()
