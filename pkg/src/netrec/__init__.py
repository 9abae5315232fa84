"""Network-based recommender models and benchmark harness."""
