"""Tour of the synthetic shape dataset: classes, folds and foreground-ratio regimes."""
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from lccan.ida import route
from lccan.synthia import DataConfig, generate_dataset, sample_episode

manifest = generate_dataset(DataConfig(), seed=0)
print(len(manifest.samples), "samples,", len(manifest.classes), "classes")
for f, classes in enumerate(manifest.folds):
    print("fold", f, [manifest.classes[c] for c in classes])

mus = np.array([s.mu for s in manifest.samples])
branches = [route(m) for m in mus]
for b in ("Crop", "None", "Downsize"):
    print(f"{b:>9}: {branches.count(b) / len(mus):.0%}")

# one sample per class, mask outline drawn on top
fig, axes = plt.subplots(2, 6, figsize=(12, 4.4))
for c, ax in enumerate(axes.flat):
    s = manifest.by_class(c)[0]
    ax.imshow(s.image.transpose(1, 2, 0))
    ax.contour(s.mask, levels=[0.5], colors="k", linewidths=0.8)
    ax.set_title(f"{manifest.classes[c]}  mu={s.mu:.2f}", fontsize=8)
    ax.axis("off")
fig.tight_layout()
fig.savefig("classes.png", dpi=90)

ep = sample_episode(manifest, fold=0, K=1, role="eval", seed=0)
print("episode 0 of fold 0:", manifest.classes[ep.class_id],
      "support", ep.support[0].sample_id, "query", ep.query.sample_id)
