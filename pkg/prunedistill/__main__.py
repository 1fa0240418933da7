import os
import sys

# BLAS reads its thread count once, at import
if "--deterministic" in sys.argv[1:] or os.environ.get("PTD_THREADS"):
    threads = "1" if "--deterministic" in sys.argv[1:] else os.environ["PTD_THREADS"]
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = threads

from prunedistill.cli import main  # noqa: E402

if __name__ == "__main__":
    main()
