# coding: utf-8

# # Striping over disks of different sizes
#
# Three components of 5, 3 and 7 blocks with an interleave of one block.

# In[1]:

from ffskit.ccd import CcdConfig, build_table, map_block

table = build_table(CcdConfig.from_sizes([5, 3, 7], ileave=1))
print(table.text())


# Every component takes part while all of them have room, then the small one
# drops out, then only the largest is left.  Laid out by hand:

# In[2]:

grid = {}
for lblk in range(table.total):
    comp, off = map_block(table, lblk)
    grid[comp, off] = lblk

for comp in range(3):
    print(f"disk {comp}:", " ".join(f"{grid.get((comp, o), '.'):>2}" for o in range(7)))

print("block 13 ->", map_block(table, 13))


# With ileave 0 the components are simply concatenated.

# In[3]:

print(build_table(CcdConfig.from_sizes([5, 3, 7], ileave=0)).text())


# A filesystem is happy to live on a striped volume.  Large transfers get cut at
# every interleave boundary.

# In[4]:

import tempfile
from pathlib import Path

from ffskit.ccd import CcdVolume, Component
from ffskit.devimg import open_image
from ffskit.fs import Filesystem
from ffskit.mkfs import MkfsParams, mkfs_dev

work = Path(tempfile.mkdtemp())
sizes = [12288, 8192, 16384]
comps = [Component(open_image(work / f"d{i}.img", create_sectors=s), s, f"d{i}")
         for i, s in enumerate(sizes)]
vol = CcdVolume(CcdConfig(comps, ileave=16))
mkfs_dev(vol, MkfsParams(seed=1))

with Filesystem.mount_dev(vol) as fs:
    fs.write_file("/big", bytes(range(256)) * 1024)
print("component transfers so far:", vol.nfragments)

with Filesystem.mount_dev(vol) as fs:
    assert fs.read_file("/big") == bytes(range(256)) * 1024
    print(fs.stat("/big").st_size, "bytes read back intact")
vol.close()
