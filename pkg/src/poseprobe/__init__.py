"""Joint camera pose and radiance field optimization from few unposed views.

The pipeline treats an everyday object in the scene ("probe") as a natural
calibration target: its geometry is a hybrid voxel-SDF plus deformation
network, poses are bootstrapped by silhouette alignment and incremental
PnP, and two rendering branches (object + full scene) are optimized jointly
with geometric, feature-metric and distribution constraints.
"""

__version__ = "0.1.0"
