"""What IDA does to supports with small, medium and large objects."""
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from lccan.ida import augment_support, decide
from lccan.synthia import generate_dataset

manifest = generate_dataset(seed=0)
picks = {}
for s in manifest.samples:
    b = decide(s.mask).branch
    picks.setdefault(b, s)
    if len(picks) == 3:
        break

fig, axes = plt.subplots(3, 2, figsize=(5, 7.5))
for row, (branch, s) in zip(axes, sorted(picks.items())):
    copies = augment_support(s)
    out = copies[-1]
    d = decide(s.mask)
    print(f"{branch:>9}: mu {s.mu:.3f} -> {out.mu:.3f}  bbox {d.bbox}  window {d.window}")
    for ax, smp, title in zip(row, (s, out), ("original", branch)):
        ax.imshow(smp.image.transpose(1, 2, 0))
        ax.contour(smp.mask, levels=[0.5], colors="k", linewidths=0.8)
        ax.set_title(f"{title}  mu={smp.mu:.2f}", fontsize=9)
        ax.axis("off")
fig.tight_layout()
fig.savefig("ida_branches.png", dpi=90)
