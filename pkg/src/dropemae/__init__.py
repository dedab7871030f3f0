"""Masked-autoencoder representation learning for diffusion MRI.

The package couples a factorized spatial/diffusion transformer with a
rotary relative positional encoding defined on the acquisition geometry
(b-value shell x gradient sphere) rather than on token order, plus the
desk-scale tooling around it: a tape-based autodiff tensor core, NIfTI and
bvals/bvecs ingestion, synthetic tensor phantoms, reconstruction and
tensor-fit metrics, and a deterministic pretraining loop with a CLI.
"""

__version__ = "0.1.0"

from . import attn, checkpoint, dmri_io, dspace, mae, metrics, ndtensor, posenc, rng, trainkit

__all__ = ["attn", "checkpoint", "dmri_io", "dspace", "mae", "metrics",
           "ndtensor", "posenc", "rng", "trainkit", "__version__"]
