import os
import sys

# BLAS reads its thread count at import time, so pin it before numpy loads.
if "--deterministic" in sys.argv[1:]:
    for _name in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[_name] = "1"

from esrf.cli import main  # noqa: E402

sys.exit(main())
