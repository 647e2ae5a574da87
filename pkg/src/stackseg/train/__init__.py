"""Training stack: loss, schedule, optimizer, metrics, checkpoints, loop."""
