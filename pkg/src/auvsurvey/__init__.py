"""Post-detection analysis for underwater survey imagery: datasets, detection
metrics, crop features, PCA, K-means++ clustering, geo-tagging and LLM summaries."""

__version__ = "0.1.0"
