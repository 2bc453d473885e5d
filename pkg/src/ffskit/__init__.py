"""A userspace BSD fast filesystem: disk images, labels, buffer cache,
allocation, inodes, directories, quotas and concatenated disks."""

__version__ = "0.1.0"

from .devimg import DiskImage, DiskLabel, LabelError, Panic, PartitionDev, open_image
from .layout import CylGroup, Dinode, FormatError, Superblock
from .bufcache import BufCache, CacheConfig
from .inode import Cred, ROOTCRED
from .fs import Filesystem, mount
from .mkfs import MkfsError, MkfsParams, mkfs_image
from .fsck import fsck_lite
from .ccd import CcdConfig, CcdVolume, build_table, map_block

__all__ = [
    "DiskImage", "DiskLabel", "LabelError", "Panic", "PartitionDev", "open_image",
    "CylGroup", "Dinode", "FormatError", "Superblock", "BufCache", "CacheConfig",
    "Cred", "ROOTCRED", "Filesystem", "mount", "MkfsError", "MkfsParams", "mkfs_image",
    "fsck_lite", "CcdConfig", "CcdVolume", "build_table", "map_block",
]
