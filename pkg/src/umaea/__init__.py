"""Multi-modal knowledge-graph entity alignment at desk scale.

Pairs of knowledge graphs with graph/relation/attribute/visual modalities
are aligned by staged contrastive training; entities with missing images
get their visual slot imputed statistically and, optionally, imagined by a
variational module trained on the image-complete entities.
"""

__version__ = "0.1.0"
