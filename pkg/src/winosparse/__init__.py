"""winosparse: train small CNNs under joint spatial/Winograd sparsity,
prune in either domain, compress with dithered uniform quantization plus
LZW entropy coding, and deploy one container to sparse spatial or sparse
Winograd inference with MAC accounting."""

__version__ = "0.1.0"
