"""Layer-free container image builder with a Git-backed build cache.

Image states are stored whole in a bare Git repository; a tree of 128-bit
state IDs decides which states can be reused.  Large files are kept out of
band and hard-linked into images.
"""

from flatcache.errors import (
    BuildError,
    CorruptionError,
    FlatcacheError,
    IntegrityError,
    LockError,
    RecipeError,
    StoreError,
    UsageError,
)
from flatcache.recipe import ImageRef, Instruction, normalize, parse
from flatcache.digest import DigestInput, StateID, root_id, state_id
from flatcache.tree import CacheNode, CacheTree
from flatcache.store import Store
from flatcache.builder import BuildOptions, BuildReport, Builder

__version__ = "0.1.0"

__all__ = [
    "BuildError",
    "BuildOptions",
    "BuildReport",
    "Builder",
    "CacheNode",
    "CacheTree",
    "CorruptionError",
    "DigestInput",
    "FlatcacheError",
    "ImageRef",
    "Instruction",
    "IntegrityError",
    "LockError",
    "RecipeError",
    "StateID",
    "Store",
    "StoreError",
    "UsageError",
    "normalize",
    "parse",
    "root_id",
    "state_id",
]
