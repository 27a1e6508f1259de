"""Pin BLAS to one thread before numpy loads.

The matrices in this suite are small enough that thread synchronisation
costs more than it saves, and the acceptance tests time themselves
against single-core budgets.
"""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
