#!/usr/bin/env python3
"""Print the per-image MAC accounting tables for the builtin networks
under both counting policies, with residual gaps against the published
reference counts."""

import sys

from winosparse.cli import main

if __name__ == "__main__":
    rc = 0
    for net in ("resnet18-modified", "alexnet", "tiny-cnn"):
        print(f"{'=' * 60}\n{net}\n{'=' * 60}")
        rc |= main(["macs", "--net", net, "--domain", "both"])
    sys.exit(rc)
