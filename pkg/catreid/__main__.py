"""Allow `python -m catreid`."""

import sys

from catreid.cli.main import main

sys.exit(main())
