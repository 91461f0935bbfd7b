"""What the surface-relative hash encoding sees.

Builds a tiny deforming surface, places one query point near it and prints
each stage: the nearest vertices, their signed distances and blend weights,
the normalized 4D coordinates, and finally the blended grid feature. It then
moves the whole scene rigidly to show the feature does not change.
"""

import numpy as np
from scipy.spatial.transform import Rotation

from selfnerf.grid_encoding import HashGridConfig, HashGridTables, level_resolutions
from selfnerf.surface_relative import CanonicalSurface, NormalizationBox, SurfaceFrame, rel_feature, relative_set

np.set_printoptions(precision=4, suppress=True)

# a coarse sphere stands in for the tracked surface
rng = np.random.default_rng(0)
normals = rng.normal(size=(200, 3))
normals /= np.linalg.norm(normals, axis=1, keepdims=True)
points = 0.5 * normals
canonical = CanonicalSurface(points)
frame = SurfaceFrame(points * 1.05, normals)  # the "current" frame is slightly inflated

grid = HashGridConfig(levels=4, features=2, table_size=2**10, min_res=8, max_res=32)
tables = HashGridTables.init(grid, seed=0, scale=1.0)
box = NormalizationBox.from_canonical(canonical, d_max=0.3)
print("level resolutions:", level_resolutions(grid))

x = np.array([0.0, 0.0, 0.62])
rs = relative_set(x, frame, canonical, k=4, box=box)
print("neighbors:", rs.indices)
print("signed distances (outside > 0):", rs.distances)
print("blend weights:", rs.weights)
print("4D grid coordinates:\n", rs.z)

feature = rel_feature(x[None], frame, canonical, tables, grid, box)[0]
print("feature:", feature)

R = Rotation.from_euler("xyz", [30, -70, 110], degrees=True).as_matrix()
t = np.array([1.0, -2.0, 0.5])
moved = SurfaceFrame(frame.points @ R.T + t, frame.normals @ R.T)
again = rel_feature((x @ R.T + t)[None], moved, canonical, tables, grid, box)[0]
print("after a rigid motion, max change:", np.abs(again - feature).max())
