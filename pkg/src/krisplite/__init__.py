"""Lightweight knowledge-grounded VQA: ConceptNet-style retrieval fused with
image and question features by concatenation (Model A) or cascaded attention
(Model B), trained with a small numpy autodiff core."""

__version__ = "0.1.0"
