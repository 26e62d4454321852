"""Membership-inference auditing toolkit.

Shadow-ensemble training, likelihood-ratio and threshold attacks over
per-sample score matrices, and low-FPR ROC evaluation. The heavy lifting
lives in the compiled ``_core`` extension; this package re-exports it.
"""

from ._core import *  # noqa: F401,F403
from ._core import __version__  # noqa: F401
