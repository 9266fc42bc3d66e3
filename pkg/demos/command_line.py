"""
The command-line pipeline end to end
====================================

synth -> prepare -> train -> eval -> report, driven through the same entry
point as the ``seqdn`` console script. Everything lands in a temporary
directory that is printed at the end.
"""

import json
import tempfile
from pathlib import Path

from seqdn.cli import main

work = Path(tempfile.mkdtemp(prefix="seqdn-demo-"))
data = work / "data"

main(["synth", "--n-users", "120", "--n-items", "90", "--seed", "1", "--out", str(data)])
main(["prepare", "--input", str(data / "interactions.tsv"), "--out", str(data)])

# a small run config; anything left out keeps its default
(work / "run.json").write_text(json.dumps({
    "model": {"d_emb": 16, "d_hidden": 32, "n_layers": 2},
    "train": {"lr": 0.01, "max_epochs": 5, "patience": 3},
}))

run = work / "run"
main(["train", "--config", str(work / "run.json"), "--split", str(data / "split.jsonl"),
      "--semantic", str(data / "semantic.semb"), "--out-dir", str(run)])

# %%
# eval finds the split and semantic table through the checkpoint metadata
main(["eval", "--checkpoint", str(run / "model.ckpt"), "--out", str(run)])

main(["report", "--history", str(run / "history.csv"), "--metrics", str(run / "metrics.txt"),
      "--masks", str(run / "train_masks.txt"), "--labels", str(data / "noise_labels.tsv"),
      "--out", str(run / "report")])

print("artifacts in", work)
