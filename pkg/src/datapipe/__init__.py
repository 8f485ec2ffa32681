"""Socket data pipes that replace file-based export/import between engines."""

from .augtext import AugText
from .directory import DirectoryClient, DirectoryServer, FilePath, ReservedTarget, parse_target
from .pipe import PipeConfig, TransferError, open_input, open_output
from .wire import Codec, Column, FormatCode, FrameType, RecordBatch, Schema, TypeCode

__version__ = "0.1.0"

__all__ = [
    "AugText",
    "Codec",
    "Column",
    "DirectoryClient",
    "DirectoryServer",
    "FilePath",
    "FormatCode",
    "FrameType",
    "PipeConfig",
    "RecordBatch",
    "ReservedTarget",
    "Schema",
    "TransferError",
    "TypeCode",
    "open_input",
    "open_output",
    "parse_target",
]
