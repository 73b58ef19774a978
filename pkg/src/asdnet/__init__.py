"""Individual-aware graph pooling and population-graph GCN for ROI time series."""

__version__ = "0.1.0"
