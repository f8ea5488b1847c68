"""Engineering around the model: toy data, training, metrics, storage and the CLI."""
