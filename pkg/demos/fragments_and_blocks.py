# coding: utf-8

# # Blocks, fragments and where an 11000-byte file goes
#
# A small filesystem with 4096-byte blocks and 1024-byte fragments.  We write one
# file and watch the free-space counters move.

# In[1]:

import tempfile
from pathlib import Path

from ffskit.fs import Filesystem
from ffskit.mkfs import MkfsParams, mkfs_image

work = Path(tempfile.mkdtemp())
image = work / "frag.img"
sb = mkfs_image(str(image), params=MkfsParams(bsize=4096, fsize=1024, seed=1),
                create_sectors=16 * 2048, clock=lambda: 1_000_000_000)
print(sb.fs_ncg, "cylinder groups,", sb.fs_frag, "fragments per block")


# mkfs leaves a few loose fragments in group 0 (the tail of the summary block,
# and the rest of the block holding the root directory).  Small files soak them
# up first, so the next tail has to break a fresh block.

# In[2]:

fs = Filesystem.mount(image)
print("loose fragments in cg 0:", fs.cs[0].cs_nffree)
n = 0
while fs.cs[0].cs_nffree:
    fs.write_file(f"/small{n}", b"s" * 1000)
    n += 1
print(n, "one-fragment files later:", fs.cs[0].cs_nffree)


# Now the file itself.  Two whole blocks cover 8192 bytes; the remaining 2808
# bytes need three fragments, carved out of a third block.

# In[3]:

before = fs.sb.fs_cstotal.copy()
fs.write_file("/eleven", bytes(11000))
after = fs.sb.fs_cstotal

print("free blocks   ", after.cs_nbfree - before.cs_nbfree)
print("free fragments", after.cs_nffree - before.cs_nffree)


# One fragment of that third block is left over.  The cylinder group keeps a
# histogram of free runs by length, so a single loose fragment shows up in
# slot 1.

# In[4]:

bp, cg = fs.getcg(0)
fs.relcg(bp)
print("frsum", cg.cg_frsum[1:fs.sb.fs_frag])

ip = fs.lookup("/eleven")
print("direct pointers", ip.din.di_db[:4], "frags charged", ip.din.di_blocks)
fs.iput(ip)


# Appending a little stays inside the last fragment; crossing into the fourth
# kilobyte of the tail grows it to four fragments.  The neighbouring fragment is
# the free one we saw above, so the run is extended where it sits.

# In[5]:

def frags(path):
    ip = fs.lookup(path)
    try:
        return ip.din.di_blocks
    finally:
        fs.iput(ip)


fs.write_file("/eleven", b"x", offset=11000)
print(fs.stat("/eleven").st_size, "bytes,", frags("/eleven"), "frags")
tail = fs.lookup("/eleven")
where = tail.din.di_db[2]
fs.write_file("/eleven", b"y" * 400, offset=11001)
print(fs.stat("/eleven").st_size, "bytes,", frags("/eleven"), "frags,",
      "tail moved" if tail.din.di_db[2] != where else "tail stayed at %d" % where)
fs.iput(tail)

fs.unmount()
