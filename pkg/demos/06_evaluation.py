# coding: utf-8

# # End-to-end evaluation
#
# Generate a synthetic dataset, train a vocabulary, build a database, then
# produce the precision/recall sweep and the re-localization report as CSV.
# The same steps are available as `python -m dxloc <subcommand>`.

# In[1]:

import tempfile
from pathlib import Path

from dxloc import evaluation as ev
from dxloc.synth import SynthConfig, generate_synthetic
from dxloc.vocabulary import save_vocab, train_incremental

root = Path(tempfile.mkdtemp())
ds = generate_synthetic(SynthConfig(seed=6), root / "ds")
save_vocab(train_incremental(ds.training.frames, seed=0), root / "vocab.dxv")
ev.build_database(root / "ds" / "seq", root / "vocab.dxv", root / "db")
print(sorted(p.name for p in root.iterdir()))


# Three detection modes are swept: two-phase, bag-of-words top-1, and
# bag-of-words top-1 with plain term-frequency weights.

# In[2]:

points = ev.run_lcd_eval(root / "ds", root / "vocab.dxv", out=root / "pr.csv")
for mode in ev.MODES:
    print(mode, "best precision at recall >= 0.8:", ev.best_precision_at_recall(points, mode, 0.8))
print((root / "pr.csv").read_text().splitlines()[:3])


# Re-localization: noisy revisits should succeed, disjoint-view queries must not.

# In[3]:

rows = ev.run_reloc_eval(root / "db", root / "ds" / "queries", out=root / "reloc.csv")
print((root / "reloc.csv").read_text().splitlines()[-1])


# Kernel timings, rows in a fixed order.

# In[4]:

for row in ev.run_benchmark(root / "vocab.dxv", root / "db", max_frames=20):
    print(f"{row.stage:16s} {row.mean_ms:8.3f} ms mean  {row.p95_ms:8.3f} ms p95")
