"""Tree-topology learning for two-stream landmark sequence classifiers."""

__version__ = "0.1.0"
