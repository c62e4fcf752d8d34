"""Road-network-aware travel-time estimation: map ingestion, GPS attribution,
node embeddings, a from-scratch autodiff engine and geo-convolutional models."""

__version__ = "0.1.0"
