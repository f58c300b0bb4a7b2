"""Cross-attention speech-to-LLM bridge with wait-k streaming.

A desk-scale, CPU-only stack: a small autodiff tensor core, transformer
layers, a toy streaming speech encoder, a cross-attention fusion model,
a wait-k read/write decoder, latency/quality metrics, and a benchmark
comparing cross-attention fusion against prepend-style fusion.
"""

__version__ = "0.1.0"
