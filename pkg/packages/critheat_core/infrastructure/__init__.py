from packages.critheat_core.infrastructure.binary_dump import DumpHeader, read_dump, write_dump
from packages.critheat_core.infrastructure.rng import substream

__all__ = ["DumpHeader", "read_dump", "substream", "write_dump"]
