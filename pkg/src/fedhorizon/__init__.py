"""Horizontal federated averaging over per-site regularized risks.

Subpackages/modules:

* ``model``      -- classifier head, objective, gradients, local SGD
* ``data``       -- manifests, patient-level splits, synthetic datasets
* ``images``     -- PPM I/O, preprocessing, augmentation, grid-pool features
* ``federation`` -- FedAvg weighting, aggregation, round engine, baselines
* ``metrics``    -- confusion matrices, per-class P/R/F1, macro-F1, accuracy
* ``transport``  -- coordinator/node wire protocol and in-process twin
* ``cli``        -- batch front end (synth / run / serve / node / eval)

The hot numeric kernels live in a compiled extension with a numpy
fallback; see ``fedhorizon.backend``.
"""

__version__ = "0.1.0"

from fedhorizon.backend import active_backend  # noqa: F401
