"""Must run before numpy loads its BLAS: two thread pools on a small CPU
need passive waiting or they starve each other (see pcnet.__init__)."""

import os
import sys

os.environ.setdefault("OMP_WAIT_POLICY", "passive")
os.environ.setdefault("OPENBLAS_THREAD_TIMEOUT", "1")

sys.path.insert(0, os.path.dirname(__file__))
