"""Run the command-line interface with ``python -m mas_faultlab``."""

from .cli import main

raise SystemExit(main())
