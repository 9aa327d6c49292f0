"""One-shot dynamic texture transfer.

Submodules: ``imagery`` (frames, masks, distance maps), ``patchmatch``
(guided NNF search + initial-frame voting), ``patch_grid`` (cut/merge),
``ncore`` (tensor engine), ``vqvae`` (patch codec), ``forecaster``
(token sequence model), ``pipeline``/``config``/``cli`` (orchestration).

Kept import-light on purpose; import the submodules you need.
"""

__version__ = "0.1.0"
