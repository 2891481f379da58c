from .colors import make_str
from .log import (
    LoggerWrap,
    logger,
)
from .seeding import (
    derive_seed,
    make_rng,
)
from .tables import render_table

__all__ = [
    "make_str",
    "derive_seed",
    "make_rng",
    "render_table",
    "LoggerWrap",
    "logger",
]
