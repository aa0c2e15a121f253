from .vehicle import (ACTION_DIM, DT, STATE_DIM, STATE_NAMES, Action, VehicleParams, VehicleState,
                      step_dynamics, wrap_angle)
from .track import TrackGeometry, circular_track, elliptical_track
from .sensors import Observation, SensorConfig, synthesize_observation
from .world import Trajectory, World, detect_crash, rollout
from .controllers import CenterlineTracker, ExplorationDriver
