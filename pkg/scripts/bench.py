"""Traffic table at the published dims plus a single-threaded forward timing."""

import sys

from dsc.cli import main

if __name__ == "__main__":
    sys.exit(main(["bench", "--paper-dims", "--timing", *sys.argv[1:]]))
