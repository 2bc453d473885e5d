import random
import struct

import pytest
from hypothesis import given, settings, strategies as st

from ffskit.devimg import (DISKMAGIC, FS_BSDFFS, MAXPARTITIONS, DiskLabel, DiskMetrics,
                           LabelError, Panic, Partition, PartitionDev, default_label, dkcksum,
                           label_bytes, label_checksum, label_text, metrics, open_image,
                           parse_label, parse_label_text, read_label, rw_sectors, write_label)


@pytest.fixture
def img(tmp_path):
    with open_image(tmp_path / "x.img", create_sectors=65536) as i:
        yield i


def test_open_existing_and_create(tmp_path, img):
    assert img.total_sectors == 65536
    img.close()
    with open_image(tmp_path / "x.img") as again:
        assert again.total_sectors == 65536


def test_open_rejects_bad_sizes(tmp_path):
    with pytest.raises(ValueError):
        open_image(tmp_path / "z.img", create_sectors=0)
    p = tmp_path / "odd.img"
    p.write_bytes(b"\0" * 1000)
    with pytest.raises(ValueError, match="not sector aligned"):
        open_image(p)
    with pytest.raises(FileNotFoundError):
        open_image(tmp_path / "missing.img")


def test_rw_roundtrip_and_range(img):
    data = bytes(range(256)) * 2
    rw_sectors(img, 0, 1, True, data)
    assert rw_sectors(img, 0, 1, False) == data
    with pytest.raises(OSError):
        rw_sectors(img, 65535, 2, False)
    with pytest.raises(ValueError):
        rw_sectors(img, 0, 1, True, b"short")


def test_read_counts_bytes_and_transfers(img):
    metrics(img, reset=True)
    rw_sectors(img, 10, 16, False)
    m = metrics(img)
    assert (m.rbytes, m.rxfer, m.wbytes, m.wxfer) == (8192, 1, 0, 0)
    m = metrics(img, reset=True)
    m = metrics(img)
    assert m.rbytes == m.wbytes == 0


def test_metrics_conserve_bytes(img):
    metrics(img, reset=True)
    rng = random.Random(3)
    total = 0
    for _ in range(200):
        n = rng.randint(1, 8)
        s = rng.randrange(0, 65536 - n)
        if rng.random() < .5:
            rw_sectors(img, s, n, False)
        else:
            rw_sectors(img, s, n, True, bytes(512 * n))
        total += 512 * n
    m = metrics(img)
    assert m.rbytes + m.wbytes == total
    assert m.busy == 0


def test_unbusy_underflow_panics():
    with pytest.raises(Panic):
        DiskMetrics().disk_unbusy(512, read=True)


def test_overlapping_busy_counts_union():
    t = iter([0, 10, 20, 30, 40, 50]).__next__
    m = DiskMetrics(clock=t)
    m.attach()          # 0
    m.disk_busy()       # 10
    m.disk_busy()       # no clock read while already busy
    assert m.busy == 2
    m.disk_unbusy(512, True)    # 20: charges 10
    m.disk_unbusy(512, True)    # 30: charges 10
    assert m.time_busy == 20 and m.busy == 0


def test_label_roundtrip(img):
    lab = default_label(img.total_sectors)
    write_label(img, lab)
    back = read_label(img)
    assert back == lab
    assert back.d_npartitions == 8
    assert back.partitions[2].p_size == img.total_sectors


def test_zeroed_label_is_bad_magic(img):
    with pytest.raises(LabelError, match="bad magic"):
        read_label(img)


def test_corrupt_partition_table_is_bad_checksum(img):
    write_label(img, default_label(img.total_sectors))
    sector = bytearray(rw_sectors(img, 0, 1, False))
    sector[128 + 148 + 5] ^= 0x40
    rw_sectors(img, 0, 1, True, bytes(sector))
    with pytest.raises(LabelError, match="bad checksum"):
        read_label(img)


def test_too_many_partitions_rejected(img):
    lab = default_label(img.total_sectors)
    lab.d_npartitions = 9
    with pytest.raises(LabelError):
        write_label(img, lab)


def test_checksum_of_magic_only_label():
    # hand xor: 0x8256 ^ 0x4557 ^ 0x8256 ^ 0x4557
    lab = DiskLabel(d_secsize=0, d_rpm=0, d_interleave=0, d_npartitions=0, d_bbsize=0,
                    d_sbsize=0)
    assert label_checksum(lab) == 0
    lab.d_magic2 = 0
    assert label_checksum(lab) == 0x8256 ^ 0x4557


def test_partition_past_unit_rejected():
    lab = default_label(1000)
    lab.partitions[1] = Partition(p_size=10, p_offset=995)
    with pytest.raises(LabelError):
        lab.validate()


def test_label_text_roundtrip():
    lab = default_label(131072)
    lab.partitions[0] = Partition(p_size=131072, p_offset=0, p_fsize=1024, p_fstype=FS_BSDFFS,
                                 p_frag=8, p_cpg=32)
    lab.d_checksum = label_checksum(lab)
    assert parse_label_text(label_text(lab)) == lab


def test_partition_window(img):
    lab = default_label(img.total_sectors)
    lab.partitions[1] = Partition(p_size=100, p_offset=1000)
    write_label(img, lab)
    dev = PartitionDev.open(img, "b")
    dev.write(0, b"\xaa" * 512)
    assert rw_sectors(img, 1000, 1, False) == b"\xaa" * 512
    with pytest.raises(OSError):
        dev.read(99, 2)
    with pytest.raises(LabelError):
        PartitionDev.open(img, "d")


_u16 = st.integers(0, 0xFFFF)
_u32 = st.integers(0, 0xFFFFFFFF)


@st.composite
def labels(draw):
    unit = draw(st.integers(1, 1 << 30))
    parts = []
    for _ in range(MAXPARTITIONS):
        size = draw(st.integers(0, unit))
        off = draw(st.integers(0, unit - size))
        fstype = draw(st.sampled_from([0, 1, FS_BSDFFS]))
        if fstype == FS_BSDFFS:
            frag = draw(st.sampled_from([0, 1, 2, 4, 8]))
        else:
            frag = draw(st.integers(0, 255))
        parts.append(Partition(size, off, draw(_u32), fstype, frag, draw(_u16)))
    name = st.binary(max_size=16).map(lambda b: b.replace(b"\0", b"x"))
    return DiskLabel(
        d_type=draw(_u16), d_subtype=draw(_u16), d_typename=draw(name), d_packname=draw(name),
        d_secsize=512, d_nsectors=draw(_u32), d_ntracks=draw(_u32), d_ncylinders=draw(_u32),
        d_secpercyl=draw(_u32), d_secperunit=unit, d_sparespertrack=draw(_u16),
        d_sparespercyl=draw(_u16), d_acylinders=draw(_u32), d_rpm=draw(_u16),
        d_interleave=draw(_u16), d_trackskew=draw(_u16), d_cylskew=draw(_u16),
        d_headswitch=draw(_u32), d_trkseek=draw(_u32), d_flags=draw(_u32),
        d_drivedata=draw(st.lists(_u32, min_size=5, max_size=5)),
        d_spare=draw(st.lists(_u32, min_size=5, max_size=5)),
        d_npartitions=draw(st.integers(0, MAXPARTITIONS)),
        d_bbsize=draw(_u32), d_sbsize=draw(_u32), partitions=parts)


@settings(max_examples=300, deadline=None)
@given(labels())
def test_label_serialize_parse_identity(lab):
    lab.validate()
    lab.d_checksum = label_checksum(lab)
    raw = label_bytes(lab)
    back = parse_label(raw)
    assert back == lab
    assert dkcksum(raw, lab.d_npartitions) == 0
    assert label_checksum(back) == back.d_checksum


def test_label_header_matches_struct_oracle():
    lab = default_label(131072)
    lab.d_checksum = label_checksum(lab)
    raw = label_bytes(lab)
    # independent packing of the leading fields
    head = struct.pack(">IHH16s16sIIIIII", DISKMAGIC, 0, 0, b"image", b"default",
                       512, 32, 16, 256, 512, 131072)
    assert raw[:len(head)] == head
    part_a = raw[148:148 + 16]
    assert part_a == struct.pack(">IIIBBH", 131072, 0, 0, FS_BSDFFS, 0, 0)
    assert raw[:4].hex() == "82564557"
