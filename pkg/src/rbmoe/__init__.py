"""Graph-free knowledge distillation: GNN teachers, structural encodings, and
mixture-of-experts students with memory-based routing."""

__version__ = "0.1.0"
