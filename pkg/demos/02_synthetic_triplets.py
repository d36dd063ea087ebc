"""A look at the synthetic (point cloud, image patch, text) triplets.

Every sample is a procedurally built object of one of six categories,
placed in front of a pinhole camera.  The script prints each sample's
caption and saves a figure with the depth patch and the point cloud seen
from above.

    python demos/02_synthetic_triplets.py [out.png]
"""
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from clipose.synthdata import CATEGORIES, DataConfig, generate_split, parse_text

out = sys.argv[1] if len(sys.argv) > 1 else "triplets.png"
samples = generate_split(1, seed=11, config=DataConfig(), split="demo")

fig, axes = plt.subplots(2, len(samples), figsize=(3 * len(samples), 6))
for i, s in enumerate(samples):
    cat, euler, t_cm = parse_text(s.text)
    print(f"{cat:>7}  {s.text}")
    print(f"         symmetry: {CATEGORIES[cat].symmetry.kind}, "
          f"distance {np.linalg.norm(s.pose.t):.2f} m, scale {np.round(s.pose.s, 3)}")
    axes[0, i].imshow(s.image[..., 0], cmap="viridis")
    axes[0, i].set_title(cat)
    axes[0, i].axis("off")
    local = s.points - s.points.mean(0)
    axes[1, i].scatter(local[:, 0], local[:, 2], s=2, c=local[:, 1], cmap="coolwarm")
    axes[1, i].set_aspect("equal")
    axes[1, i].set_xticks([])
    axes[1, i].set_yticks([])
fig.tight_layout()
fig.savefig(out, dpi=80)
print(f"\nwrote {out}")
