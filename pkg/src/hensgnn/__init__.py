"""Hierarchical GNN ensembles with proxy-based model selection."""
__version__ = "0.1.0"
