# Pruning, retraining and experiment logic
