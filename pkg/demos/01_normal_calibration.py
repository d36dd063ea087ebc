"""Turning two noisy rotation normals into a rotation matrix.

A network predicts the object's x and y axes independently, so the two
vectors are rarely perpendicular.  Calibration rotates both inside their
common plane until they are, splitting the correction by confidence:
the normal the network trusts more moves less.

    python demos/01_normal_calibration.py
"""
import numpy as np
from scipy.spatial.transform import Rotation

from clipose.geometry import (
    RotationNormals, SymmetrySpec, assemble_rotation, calibrate_normals, geodesic_deg, rotation_error_deg,
)

rng = np.random.default_rng(7)
R_gt = Rotation.random(random_state=3).as_matrix()

# corrupt the true axes the way a regressor would
r_x = R_gt[:, 0] + 0.15 * rng.standard_normal(3)
r_y = R_gt[:, 1] + 0.15 * rng.standard_normal(3)
print(f"raw angle between normals: {np.degrees(np.arccos(r_x @ r_y / np.linalg.norm(r_x) / np.linalg.norm(r_y))):.2f} deg")

for c_x, c_y in [(1.0, 1.0), (0.9, 0.1), (0.1, 0.9)]:
    n = RotationNormals(r_x, r_y, c_x, c_y)
    rx_s, ry_s = calibrate_normals(n)
    R = assemble_rotation(rx_s, ry_s)
    moved_x = np.degrees(np.arccos(np.clip(n.r_x @ rx_s, -1, 1)))
    moved_y = np.degrees(np.arccos(np.clip(n.r_y @ ry_s, -1, 1)))
    print(f"c=({c_x:.1f}, {c_y:.1f})  r_x moved {moved_x:5.2f} deg, r_y moved {moved_y:5.2f} deg, "
          f"r_x*.r_y* = {rx_s @ ry_s:+.1e}, det = {np.linalg.det(R):.6f}, error {geodesic_deg(R, R_gt):.2f} deg")

# symmetric objects: spinning a can about its axis costs nothing
spin = Rotation.from_rotvec([0, 1.234, 0]).as_matrix()
can = SymmetrySpec("rotational", (0, 1, 0))
print(f"\ncan spun by 70.7 deg: plain error {geodesic_deg(R_gt @ spin, R_gt):.1f} deg, "
      f"symmetry-aware error {rotation_error_deg(R_gt @ spin, R_gt, can):.2e} deg")
