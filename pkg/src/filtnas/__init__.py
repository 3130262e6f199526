"""Differentiable search over filter-level quantization and pruning configurations."""
