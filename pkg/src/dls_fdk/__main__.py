"""Interface for ``python -m dls_fdk``."""

import sys
from collections.abc import Sequence

from .cli import run

__all__ = ["main"]


def main(args: Sequence[str] | None = None) -> None:
    """Run the dls-fdk command line and exit with its status."""
    sys.exit(run(args))


if __name__ == "__main__":
    main()
