"""
End to end without a model server
=================================

The mock workspace holds a tiny base archive, six expert deltas, their
domain embeddings and a labelled target corpus. The mock backend answers
generation requests from gold labels, so the whole pipeline runs offline.
"""

# %%
import json
import tempfile
from pathlib import Path

from samkit.cli import main
from samkit.mockdata import make_mock_workspace

root = Path(tempfile.mkdtemp())
config = make_mock_workspace(root / "ws", perfect=False, seed=3)
print(sorted(p.name for p in config.parent.iterdir()))

# %%
out = root / "out"
main(["run", "--config", str(config), "--output-dir", str(out), "--m", "3"])
print(json.dumps(json.loads((out / "merge_report.json").read_text())["ds"]["experts"]))
print(json.loads((out / "eval_report.json").read_text()))

# %%
# economic mode serves a single merged model
main(["run", "--config", str(config), "--output-dir", str(root / "eco"), "--ensemble", "eco1"])
print(sorted(p.name for p in (root / "eco").glob("*.safetensors")))

# %%
main(["cost", "--H", "4096", "--r", "32", "--L", "32", "--n", "10"])
