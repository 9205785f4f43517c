"""Console entry point kept outside the package on purpose.

Importing anything from ``ripplegrid`` pulls in numpy, and BLAS backends
read their thread-count environment variables once, at load time.  This
shim scans argv for --threads with nothing but the stdlib imported, pins
the env vars, and only then hands off to the real CLI.
"""

import os
import sys


def _peek_threads(argv):
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--threads="):
            return arg.split("=", 1)[1]
    return None


def main(argv=None):
    args = list(sys.argv[1:] if argv is None else argv)
    threads = _peek_threads(args)
    if threads is None:
        threads = "1"
    if threads.isdigit() and int(threads) > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    from ripplegrid.cli import main as _main

    return _main(args)


if __name__ == "__main__":
    sys.exit(main())
