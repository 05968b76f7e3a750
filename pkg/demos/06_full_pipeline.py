"""The whole benchmark through the command-line entry point.

Writes a small two-class PNG tree, then drives every stage the same way
a shell user would: prepare, weight-eval, grid, replicate, cam. Ends by
rerunning replicate to show the outputs are byte-stable.
"""

import json
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from vitbench.cli import main

base = Path(tempfile.mkdtemp(prefix="vitbench_pipeline_"))
data = base / "data"
out = base / "out"

rng = np.random.default_rng(0)
for label, n in (("normal", 12), ("abnormal", 12)):
    (data / label).mkdir(parents=True)
    for i in range(n):
        img = rng.uniform(0.1, 0.3, size=(16, 16, 3))
        if label == "normal":
            img[4:12, 4:12] += 0.6
        else:
            img[:5, :5] += 0.65
        arr = (np.clip(img, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr).save(data / label / f"{label}_{i:02d}.png")

config = {
    "dataset": {"root": str(data),
                "class_map": {"normal": 0, "abnormal": 1},
                "image_size": 16},
    "folds": {"k": 2, "seed": 3},
    "model": {"patch_size": 8, "embed_dim": 8, "depth": 1, "num_heads": 2},
    "train": {"batch_size": 8, "learning_rate": 0.001, "epochs": 2,
              "n_replications": 2, "seed": 5,
              "grid": {"batch_sizes": [8], "learning_rates": [0.001],
                       "epoch_counts": [2]}},
    "interpret": {"max_images": 2},
    "output": {"directory": str(out)},
}
cfg_path = base / "config.json"
cfg_path.write_text(json.dumps(config, indent=2))

for stage in ("prepare", "weight-eval", "grid", "replicate", "cam"):
    print(f"\n$ vitbench {stage} --config config.json")
    code = main([stage, "--config", str(cfg_path)])
    assert code == 0, f"{stage} exited {code}"

print("\noutput tree:")
for path in sorted(out.rglob("*")):
    if path.is_file():
        print(" ", path.relative_to(out))

before = (out / "results" / "replicate.json").read_bytes()
config["output"]["directory"] = str(base / "out2")
cfg_path.write_text(json.dumps(config, indent=2))
assert main(["replicate", "--config", str(cfg_path)]) == 0
after = (base / "out2" / "results" / "replicate.json").read_bytes()
print("\nreplicate rerun byte-identical:", before == after)
