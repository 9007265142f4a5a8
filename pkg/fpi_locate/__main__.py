"""Allow running with `python -m fpi_locate`."""
import sys

from fpi_locate.cli import main

sys.exit(main())
