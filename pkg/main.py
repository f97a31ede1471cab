"""
Cat re-identification toolkit - Entry Point

Run with: python main.py <subcommand> [options]
Or, once installed: catreid <subcommand> [options]
"""

import sys

from catreid.cli.main import main

if __name__ == "__main__":
    sys.exit(main())
