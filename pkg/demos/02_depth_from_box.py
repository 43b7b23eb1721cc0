"""Depth from detected box size: normalize an object into a unit sphere and
the pixel size of its detection box encodes how far away it is.

Walks the full loop: point cloud -> unit-sphere normalization -> silhouette
box under a pinhole camera -> recovered range, with the approximation error
as a function of range.
"""

import numpy as np

from blockwind.camera import CameraIntrinsics, depth_from_bbox, sphere_bbox
from blockwind.cloud import PointCloud, normalize

k = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)

# A scanned block: 1000 noisy surface points of a 7.5 x 2.5 x 1.5 cm box.
rng = np.random.default_rng(0)
pts = rng.uniform(-1.0, 1.0, size=(1000, 3)) * [0.0375, 0.0125, 0.0075]
pts += rng.normal(scale=5e-4, size=pts.shape)
cloud = PointCloud(pts + [0.4, -0.2, 0.05])  # wherever the scan put it

normalized, params = normalize(cloud)
print(f"cloud center {params.center}, bounding radius {params.radius:.4f} m")
print(f"normalized max norm: {np.linalg.norm(normalized.points, axis=1).max():.9f}")

# The physical object's bounding sphere diameter:
diameter = 2 * params.radius

print("\nrange sweep (true range -> recovered range):")
for true_range in (0.3, 0.5, 1.0, 2.0):
    center_cam = np.array([0.0, 0.0, true_range])
    box = sphere_bbox(center_cam, params.radius, k)
    recovered = depth_from_bbox(box, diameter, k)
    rel = (recovered - true_range) / true_range
    print(
        f"  {true_range:4.1f} m: box {box.width:6.1f} px -> "
        f"{recovered:.4f} m ({rel:+.2%})"
    )

print("\nThe bias is the second-order silhouette effect, about (d/2D)^2/2;")
print("past a few diameters of range it is inside the 2% budget.")
