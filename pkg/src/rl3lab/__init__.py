"""Value-augmented meta-RL laboratory."""
