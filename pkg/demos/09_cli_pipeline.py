"""
The command-line pipeline
=========================

The same steps as the other demos, driven through ``vitsmall`` subcommands
and a JSON config. Each call writes its resolved ``config.json`` next to its
outputs. From a shell the equivalent is::

    vitsmall pretrain --config demos/configs/tiny_synthetic.json --out runs/cli/pre
    vitsmall finetune --config ... --checkpoint runs/cli/pre/pretrain_final.svtc --out runs/cli/ft
    vitsmall eval     --config ... --checkpoint runs/cli/ft/finetune_final.svtc --out runs/cli/eval
    vitsmall attnmap  --config ... --checkpoint runs/cli/ft/finetune_final.svtc --out runs/cli/attn
    vitsmall init-compare --config ... --epochs 5 --out runs/cli/compare

``demos/configs/cifar10_desk.json`` is the desk-scale CIFAR-10 setup; point
``dataset.path`` at the extracted binary batches.
"""

import json
from pathlib import Path

from vitsmall.cli import main

config = str(Path(__file__).parent / "configs" / "tiny_synthetic.json")
out = Path("runs/cli")

steps = [
    ["pretrain", "--config", config, "--out", str(out / "pre")],
    ["finetune", "--config", config, "--out", str(out / "ft"), "--checkpoint", str(out / "pre/pretrain_final.svtc")],
    ["eval", "--config", config, "--out", str(out / "eval"), "--checkpoint", str(out / "ft/finetune_final.svtc")],
    ["attnmap", "--config", config, "--out", str(out / "attn"), "--checkpoint", str(out / "ft/finetune_final.svtc")],
    ["init-compare", "--config", config, "--epochs", "5", "--out", str(out / "compare")],
]
for argv in steps:
    code = main(argv)
    print(f"vitsmall {argv[0]:<13} exit {code}")
    if code:
        raise SystemExit(code)

print(json.loads((out / "eval" / "eval.json").read_text()))
print((out / "compare" / "init_compare.csv").read_text())

###############################################################################
# A bad key is reported with its path and exit code 2.

bad = out / "bad.json"
bad.write_text(json.dumps({"vit": {"depht": 2}}))
print("exit code for unknown key:", main(["pretrain", "--config", str(bad)]))
