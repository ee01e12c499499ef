"""Active instance selection for sparsely annotated oriented object detection."""

__version__ = "0.1.0"
