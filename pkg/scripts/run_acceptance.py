"""Run the acceptance suite and show only its PASS/FAIL lines plus the pytest summary."""

import sys

import pytest

if __name__ == "__main__":
    sys.exit(pytest.main(["-q", "tests/test_acceptance.py", *sys.argv[1:]]))
