"""State and action layout shared by the simulator, cost and planner."""

STATE_DIM = 6
ACTION_DIM = 2
STATE_NAMES = ("x", "y", "psi", "vx", "vy", "psidot")
