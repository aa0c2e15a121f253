"""Imitation learning for fast driving: simulator, SSGP dynamics, belief-space DDP expert and DAgger."""
