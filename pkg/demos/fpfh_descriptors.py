"""FPFH descriptors on the synthetic scene.

Plane points and sphere points end up with clearly different descriptors, and
a rigid motion of the whole cloud leaves every descriptor where it was.
"""

import numpy as np
from scipy.spatial.transform import Rotation

from geoagg.cloud import PointCloud
from geoagg.fpfh import compute_fpfh
from geoagg.synthetic import SCENE_FPFH, two_primitive_scene

scene = two_primitive_scene()
geo = compute_fpfh(scene.cloud, SCENE_FPFH)
print(f"descriptors: {geo.shape}, row norms in [{np.linalg.norm(geo, axis=1).min():.6f}, "
      f"{np.linalg.norm(geo, axis=1).max():.6f}]")

plane, sphere = geo[scene.labels == 0].mean(0), geo[scene.labels == 1].mean(0)
print(f"cosine between mean plane and mean sphere descriptor: "
      f"{plane @ sphere / np.linalg.norm(plane) / np.linalg.norm(sphere):.3f}")

rot = Rotation.from_euler("xyz", [30, -50, 110], degrees=True).as_matrix()
moved = PointCloud(scene.cloud.xyz() @ rot.T + [3.0, -1.0, 7.0])
drift = np.abs(compute_fpfh(moved, SCENE_FPFH) - geo).max()
print(f"largest component change under a rigid motion: {drift:.2e}")
