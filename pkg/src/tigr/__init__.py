"""Trajectory representation learning on grids and road networks.

Three parallel branches (grid cells, road segments, spatio-temporal
dynamics) are pretrained contrastively and evaluated on trajectory
similarity, travel time estimation, and destination prediction.
"""

__version__ = "0.1.0"
