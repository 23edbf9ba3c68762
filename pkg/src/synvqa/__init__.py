"""Video question answering on precomputed features.

Questions arrive as dependency parses and are lifted to syntactic
hypergraphs; frame and clip features are aligned to word compositions by
optimal transport; fused representations feed task-specific answer heads.
"""

__version__ = "0.1.0"
