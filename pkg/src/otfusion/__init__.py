"""Cross-modal token/patch fusion: multi-head entropic optimal-transport
alignment, entropy-confidence gated fusion, and a variational bottleneck
classifier, trained end-to-end on synthetic form-like documents."""

__version__ = "0.1.0"
