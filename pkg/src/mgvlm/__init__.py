"""Desk-scale multi-grained vision-language pre-training.

One model with vision, text, and fusion transformers, trained jointly on
contrastive alignment, pair matching, masked-language modeling, and
bounding-box localization over a unified sample schema that covers
image-text, object, region, and video-text data.
"""

import os as _os

# Bit-exact run-to-run reproducibility (and better small-matrix speed)
# requires a fixed BLAS thread count; honored only if numpy has not been
# imported yet and the user has not set these explicitly.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
