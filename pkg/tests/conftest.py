import sys

import pytest

from ffskit.fs import Filesystem
from ffskit.mkfs import MkfsParams, mkfs_image

MiB = 1024 * 1024


class FakeClock:
    """Settable integer clock for grace periods and timestamps."""

    def __init__(self, t: int = 1_000_000_000):
        self.t = t

    def __call__(self) -> int:
        return self.t

    def advance(self, secs: int) -> None:
        self.t += secs


@pytest.fixture
def clock():
    return FakeClock()


def make_image(path, size_bytes=64 * MiB, **params):
    params.setdefault("seed", 7)
    mkfs_image(str(path), params=MkfsParams(**params), create_sectors=size_bytes // 512,
               clock=lambda: 1_000_000_000)
    return str(path)


@pytest.fixture
def image(tmp_path):
    return make_image(tmp_path / "disk.img")


@pytest.fixture
def fs(image, clock):
    f = Filesystem.mount(image, clock=clock, record_events=True)
    yield f
    if f.mounted:
        f.unmount()


@pytest.fixture
def small_fs(tmp_path, clock):
    """4096/1024 filesystem, the geometry of the classic 11000-byte example."""
    path = make_image(tmp_path / "small.img", 16 * MiB, bsize=4096, fsize=1024)
    f = Filesystem.mount(path, clock=clock, record_events=True)
    yield f
    if f.mounted:
        f.unmount()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(mod.line(n))
