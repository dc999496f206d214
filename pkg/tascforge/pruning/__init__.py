"""Training-history filter pruning: trajectories, pair ranking, victim selection, surgery and the prune loop."""
