"""Tour of the icosphere hierarchy.

Builds the nested meshes the network convolves and pools over, prints
their invariants, and exports one level for inspection in any OBJ viewer.
"""

import numpy as np

from icocnn.icosphere import build_hierarchy, export_obj, neighbor_ring

hierarchy = build_hierarchy(5)

print("level  nodes   faces   edges   mean edge (rad)")
for lv in hierarchy.levels:
    print(
        f"{lv.level:5d}  {lv.n_nodes:6d}  {lv.n_faces:6d}  {lv.n_edges:6d}   "
        f"{lv.mean_edge_length:.5f}"
    )

# Twelve nodes keep degree 5 forever: the original icosahedron vertices.
lv = hierarchy.level(3)
degrees = lv.degrees()
print(f"\nlevel 3 degree counts: 5 -> {int((degrees == 5).sum())}, 6 -> {int((degrees == 6).sum())}")

# Rings of neighbors are what polygonal patches sample.
for order in range(4):
    ring = neighbor_ring(lv, 100, order)
    print(f"ring order {order} around node 100: {ring.size} nodes")

# Pooling groups average 6 or 7 fine nodes onto each parent.
groups = hierarchy.pooling_groups(2)
sizes = groups.sizes()
print(f"\nlevel 3 -> 2 pooling groups: {groups.n_coarse}, sizes "
      f"{dict(zip(*np.unique(sizes, return_counts=True)))}")
print(f"sum of sizes = {int(sizes.sum())} "
      f"(= parents once + midpoints twice = {lv.n_nodes + (lv.n_nodes - groups.n_coarse)})")

export_obj(hierarchy.level(2), "icosphere_level2.obj")
print("\nwrote icosphere_level2.obj")
