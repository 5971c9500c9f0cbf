"""Contrastive, variational registration of 3-D volumes for atlas-based segmentation.

Modules:

- ``ndtensor``: float64 tensors with reverse-mode differentiation
- ``warp``: trilinear and nearest pull warping, Jacobian determinants
- ``network``: siamese encoder, projection head and field decoder
- ``losses``: reconstruction, KL smoothness and contrastive terms
- ``synthdata``: synthetic atlases, smooth deformations, CLMV volume files
- ``trainer``: Adam training loop and checkpoints
- ``metrics``: Dice, Hausdorff and average symmetric surface distance
- ``pipeline``: segmentation and registration with a trained network
- ``cli``: the ``clmorph`` command
"""

__version__ = "0.1.0"
