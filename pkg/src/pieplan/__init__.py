"""pieplan: a desk-scale end-to-end driving planner and its evaluation stack."""

__version__ = "0.1.0"
