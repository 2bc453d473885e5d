# coding: utf-8

# # A tour of the buffer cache
#
# Sizing, the free lists, delayed writes and read-ahead, first on a bare cache
# backed by a dictionary and then underneath a mounted filesystem.

# In[1]:

from ffskit.bufcache import B, BufCache, CacheConfig, Q

MiB = 1 << 20

big = BufCache(CacheConfig(physmem_bytes=128 * MiB, page_size=8192))
print(big.nbuf, "buffers,", big.arena_bytes // 1024, "KiB of pages, hash size", big.hashsize)


# A toy device: a dict keyed by (file, logical block).

# In[2]:

disk = {}


def strategy(bp):
    key = (bp.file, bp.lblkno)
    if bp.flags & B.READ:
        bp.data[:bp.bcount] = disk.get(key, bytes(bp.bcount))[:bp.bcount]
    else:
        disk[key] = bytes(bp.data[:bp.bcount])


bc = BufCache(CacheConfig(page_size=4096, nbuf=16, bufpages=16), strategy=strategy)
print(len(bc.queues[Q.EMPTY]), "empty headers,", len(bc.queues[Q.AGE]), "on AGE")


# Reading a block takes a buffer from the AGE list (new buffers start there),
# and releasing it puts it on the LRU list.

# In[3]:

bp = bc.bread("f", 0, 4096)
bc.brelse(bp)
print("LRU:", [b.identity for b in bc.queues[Q.LRU].values()])
print("hits", bc.stats.hits, "misses", bc.stats.misses)

bp = bc.bread("f", 0, 4096)
bc.brelse(bp)
print("hits", bc.stats.hits, "misses", bc.stats.misses)


# A delayed write only marks the buffer dirty.  Nothing reaches the device until
# the buffer is reused or flushed.

# In[4]:

bp = bc.bread("f", 1, 4096)
bp.data[:5] = b"hello"
bc.bdwrite(bp)
print("on disk yet?", ("f", 1) in disk, " dirty buffers:", bc.dirty_count())

for n in range(2, 40):          # churn through every buffer
    bc.brelse(bc.bread("f", n, 4096))
print("on disk now?", disk.get(("f", 1), b"")[:5], " flushed:", bc.stats.delwri_flushed)


# breadn starts the next block while handing back the current one; the second
# read is then a hit that is credited to read-ahead.

# In[5]:

bc.brelse(bc.breadn("g", 0, 4096, [1], [4096]))
bc.brelse(bc.bread("g", 1, 4096))
print("read-ahead issued", bc.stats.ra_issued, "and used", bc.stats.ra_hits)
bc.check_invariants()


# The same counters under a real filesystem: a sequential read of a 100 KB file
# after a remount.

# In[6]:

import tempfile
from pathlib import Path

from ffskit.fs import Filesystem
from ffskit.mkfs import MkfsParams, mkfs_image

image = Path(tempfile.mkdtemp()) / "cache.img"
mkfs_image(str(image), params=MkfsParams(seed=1), create_sectors=32768)
with Filesystem.mount(image) as fs:
    fs.write_file("/seq", bytes(100_000))

with Filesystem.mount(image) as fs:
    fs.read_file("/seq")
    s = fs.cache.stats
    print(f"misses {s.misses} (of which read-ahead {s.ra_issued}), read-ahead hits {s.ra_hits}")
