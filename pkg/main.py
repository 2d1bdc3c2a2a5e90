"""
Main module, runs one `nlc_lab` command, e.g. `python main.py sample --help`.
"""

import sys

from nlc_lab.cli import execute

if __name__ == "__main__":
    sys.exit(execute(sys.argv[1:]))
