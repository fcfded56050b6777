"""
The command-line pipeline end to end
====================================

Equivalent shell session::

    embmmt synth --out task
    embmmt train --config task/experiment.json
    embmmt translate --checkpoint task/run/model.ckpt --input task/test.src --out task/test.out
    embmmt evaluate --hyp task/test.out --ref task/test.tgt --train-corpus task/train.tgt --out task/eval

Here the same calls go through ``embmmt.cli.main`` with a short epoch budget.
"""

import json
import sys
import tempfile
from pathlib import Path

from embmmt.cli import main

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
root = Path(tempfile.mkdtemp(prefix="embmmt-"))
task = root / "task"

assert main(["synth", "--out", str(task)]) == 0
config = json.loads((task / "experiment.json").read_text())
config["train"]["epochs"] = epochs
(task / "experiment.json").write_text(json.dumps(config, indent=2))

assert main(["train", "--config", str(task / "experiment.json")]) == 0
assert main(["translate", "--checkpoint", str(task / "run" / "model.ckpt"),
             "--input", str(task / "test.src"), "--out", str(task / "test.out")]) == 0
assert main(["evaluate", "--hyp", str(task / "test.out"), "--ref", str(task / "test.tgt"),
             "--train-corpus", str(task / "train.tgt"), "--out", str(task / "eval")]) == 0
print("outputs in", root)
