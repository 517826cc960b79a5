"""
Bibtex benchmark
================

Train on the standard Bibtex split (4880 train / 1836 test, 159 labels) and
report precision@{1,3,5}. Point ``FSGP_BIBTEX_DIR`` at a directory holding
either ``train.txt`` and ``test.txt`` or ``Bibtex_data.txt`` with the split
files ``bibtex_trSplit.txt`` / ``bibtex_tstSplit.txt``.
"""

import os
import sys
from pathlib import Path

from fsgp import TrainConfig, evaluate, load_dataset, train
from fsgp.data import load_split

root = Path(os.environ.get("FSGP_BIBTEX_DIR", "."))
if (root / "train.txt").exists():
    train_set, test_set = load_dataset(root / "train.txt"), load_dataset(root / "test.txt")
elif (root / "Bibtex_data.txt").exists():
    full = load_dataset(root / "Bibtex_data.txt")
    train_set = full.subset(load_split(root / "bibtex_trSplit.txt"))
    test_set = full.subset(load_split(root / "bibtex_tstSplit.txt"))
else:
    sys.exit(f"no Bibtex files under {root}")

# %%
config = TrainConfig(latents=10, inducing=100, rank=500, batch_size=500, epochs=50, seed=0)
state, history = train(config, train_set)
print(evaluate(state, test_set, config=config.to_dict()).to_text())
