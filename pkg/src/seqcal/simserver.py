"""Serve a built-in testbed over the external-simulator protocol.

Usage: ``python -m seqcal.simserver <testbed> [--discrepancy]``. Requests and
replies are in natural units; the discrepancy flag adds the testbed's bias.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from .external import serve
from .testbeds import get_testbed


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m seqcal.simserver")
    ap.add_argument("testbed")
    ap.add_argument("--discrepancy", action="store_true")
    args = ap.parse_args(argv)
    opts = {"discrepancy": True} if args.discrepancy else {}
    model = get_testbed(args.testbed, **opts)

    def evaluate(x, theta):
        x = np.atleast_2d(x)
        out = model.eta(x, np.atleast_2d(theta))
        if args.discrepancy and model.bias is not None:
            out = out + model.bias(x)
        return float(np.asarray(out).ravel()[0])

    return serve(evaluate)


if __name__ == "__main__":
    sys.exit(main())
