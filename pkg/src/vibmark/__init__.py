"""Information-bottleneck watermarking toolkit.

Modules: ``info`` (exact discrete information measures), ``mss`` (minimal
sufficient partitions), ``ib`` (IB solver and curves), ``autodiff`` (reverse
mode on numpy), ``noise`` (distortion channels), ``net`` (toy watermark
model), ``analysis`` (diagnostics) and ``experiment`` (config-driven runs).
"""
__version__ = "0.1.0"
