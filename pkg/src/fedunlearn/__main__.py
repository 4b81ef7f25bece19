"""Allow ``python -m fedunlearn``."""

import sys

from .cli import main

sys.exit(main())
