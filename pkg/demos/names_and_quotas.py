# coding: utf-8

# # Directories, the name cache and quotas

# In[1]:

import errno
import tempfile
from pathlib import Path

from ffskit.fs import Filesystem
from ffskit.inode import Cred
from ffskit.mkfs import MkfsParams, mkfs_image
from ffskit.namespace import parse_chunk
from ffskit.quota import USRQUOTA, quota_mismatches, rebuild

image = Path(tempfile.mkdtemp()) / "names.img"
mkfs_image(str(image), params=MkfsParams(seed=1), create_sectors=32768)
fs = Filesystem.mount(image)


# Directory entries are variable length and live in 512-byte chunks.  The last
# entry in a chunk owns the slack, and a removed entry's space folds into the
# one before it.

# In[2]:

fs.mkdir("/d")
for name in ("alpha", "beta", "gamma"):
    fs.write_file(f"/d/{name}", b"")


def show(path):
    ip = fs.lookup(path)
    raw = fs.read(ip, 0, 512)
    fs.iput(ip)
    return [(e.name.decode(), e.reclen) for e in parse_chunk(raw, 0)]


print(show("/d"))
fs.unlink("/d/beta")
print(show("/d"))


# The name cache answers repeat lookups without searching the directory, and
# remembers misses too.

# In[3]:

fs.stat("/d/alpha")
searches = fs.nstats["dir_searches"]
for _ in range(5):
    fs.stat("/d/alpha")
print("directory searches for 5 repeat lookups:", fs.nstats["dir_searches"] - searches)

try:
    fs.stat("/d/nothing")
except OSError as e:
    assert e.errno == errno.ENOENT
searches = fs.nstats["dir_searches"]
for _ in range(5):
    try:
        fs.stat("/d/nothing")
    except OSError:
        pass
print("searches for 5 repeat misses:", fs.nstats["dir_searches"] - searches,
      " negative hits:", fs.ncache.stats.neghits)


# Quotas.  Usage is counted in fragments and inodes per user.  Turning quotas
# on does not scan the disk, so we recount once afterwards.

# In[4]:

fs.write_file("/quota.user", b"")
fs.quota.quota_on(USRQUOTA, "/quota.user")
rebuild(fs)

alice = Cred(uid=501, privileged=False)
fs.quota.setquota(USRQUOTA, 501, bsoft=8, bhard=12)

ip = fs.create("/a.dat", cred=alice)
fs.write(ip, 0, bytes(8 * 1024), cred=alice)
print(fs.quota.getquota(USRQUOTA, 501))


# Going over the soft limit is allowed and starts the grace clock.  The hard
# limit is never crossed by an unprivileged writer.

# In[5]:

fs.write(ip, 8 * 1024, bytes(2 * 1024), cred=alice)
print("events:", fs.quota.events[-1:])
try:
    fs.write(ip, 10 * 1024, bytes(4 * 1024), cred=alice)
except OSError as e:
    print("write refused:", errno.errorcode[e.errno])
fs.iput(ip)

print("recount agrees:", quota_mismatches(fs) == [])
fs.unmount()
