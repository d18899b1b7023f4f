"""train_and_explain.py

A small end-to-end run: synthesize a copy-move set, train the five-block CNN
for a few epochs, then render Grad-CAM overlays for forged predictions.
The same steps are available as `forgecam synth|train|eval|explain`.

With 1000 images the network memorizes the training split within a few
epochs and validation accuracy stays near 0.6; the acceptance run uses twice
the data and 15 epochs to clear 0.75.
"""
from pathlib import Path

import numpy as np

from forgecam import gradcam as G
from forgecam.cli import main
from forgecam.dataset import DatasetManifest, load_image_tensor
from forgecam.imaging import read_mask, read_png, write_png
from forgecam.model import load_checkpoint
from forgecam.training import evaluate

root = Path("train_demo")

main(["synth", "--procedural", "--count", "500", "--kind", "copy_move", "--seed", "0",
      "--radius-min", "0.18", "--radius-max", "0.3", "--alpha-interior", "1", "--feather-px", "0",
      "--out", str(root / "data")])
main(["train", "--scenario", "model2_copymove", "--manifest", str(root / "data" / "manifest.jsonl"),
      "--epochs", "10", "--learning-rate", "3e-4", "--batch-size", "16", "--out", str(root / "run")])

model = load_checkpoint(root / "run" / "model.fgl")
manifest = DatasetManifest.load(root / "run" / "train_manifest.jsonl")
rep = evaluate(model, manifest, "val")
print("val accuracy", rep.accuracy, "per kind", {k: v["accuracy"] for k, v in rep.per_kind.items()})

# Grad-CAM on the first few forged validation images the model calls forged
shown = 0
for i in manifest.split_ids("val"):
    r = manifest.records[i]
    if r.label != 1:
        continue
    x = load_image_tensor(manifest.resolve(r.image_path), model.arch.input_size)[None]
    heat, logit = G.grad_cam(model, x)
    if logit <= 0:
        continue
    image = read_png(manifest.resolve(r.image_path))
    mask = read_mask(manifest.resolve(r.mask_path))
    score = G.localization_score(heat, mask)
    print(f"record {i}: logit {logit:.2f}, concentration ratio {score.concentration_ratio:.2f}")
    write_png(root / f"overlay_{i}.png", G.render_overlay(image, heat))
    shown += 1
    if shown == 4:
        break

# the authentic score is the negated logit, so its gradients are negated too
a, g_forged, _ = G.feature_gradients(model, x, G.FORGED)
_, g_auth, _ = G.feature_gradients(model, x, G.AUTHENTIC)
print("authentic gradients are the negation:", np.array_equal(g_auth, -g_forged))
