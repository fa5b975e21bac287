# Minimal deterministic feed-forward training engine
