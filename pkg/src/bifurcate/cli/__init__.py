"""Command-line front end: configs, run directories, manifests and checkpoints."""
