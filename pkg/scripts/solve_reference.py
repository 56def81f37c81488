"""Solve the 35M-parameter GPT backbone configs and compare against the published widths."""

import sys

from dsc.cli import main

if __name__ == "__main__":
    sys.exit(main(["solve", "--check-paper", *sys.argv[1:]]))
