"""chemocal: chemometric calibration toolkit for NIR hyperspectral grain
analysis.

Pipeline pieces: cube preprocessing (`cube`), spectral operators
(`specprep`), NIPALS PLS models (`pls`), the bulk-mean calibration
protocol (`calib`), linear bias correction (`correct`), per-bulk
distribution diagnostics (`diagnose`), grain-density sweeps (`density`),
and a seeded synthetic oracle (`synth`).  The `chemocal` command binds
them end to end.
"""

from .errors import DataError

__version__ = "0.1.0"

__all__ = ["DataError", "__version__"]
