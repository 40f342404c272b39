"""Data generation, configuration, checkpoints, training, inference and the CLI."""
