"""racestack - desk-scale autonomous racing planning and control stack

Simulated vehicles and LIDAR, particle-filter localization, Follow-The-Gap,
pure pursuit, cubic-spline state-lattice planning with a learned RBF
approximation, V2V roundabout coordination and runtime safety monitors,
all driven by a deterministic scenario runner.
"""

__version__ = "1.0.0"
__author__ = "racestack developers"
