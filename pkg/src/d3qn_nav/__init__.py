"""Dueling double DQN obstacle avoidance on simulated depth scans.

Submodules: ``geom_sim`` (world, kinematics, raycasting), ``depth_sensor``
(scan corruption), ``neuro`` (numpy network engine and Adam), ``qagent``
(DQN / double DQN / dueling double DQN), ``trainer`` (episodes, curriculum,
comparison), ``cli`` (command line).
"""

__version__ = "0.1.0"
