"""Exponentiate a smooth velocity field and sanity-check its inverse.

Run from the repository root:

    python3 demos/transform_playground.py

Builds a random smooth stationary velocity field, composes it with a small
rotation, warps a phantom image back and forth, and prints how close the
round trip lands to the identity. Writes before/after/round-trip images to
``demo_runs/transforms/``.
"""

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from cardiacatlas import phantom
from cardiacatlas import transforms as T
from cardiacatlas.seeds import child_rng

OUT = Path("demo_runs/transforms")
OUT.mkdir(parents=True, exist_ok=True)

H, W = 112, 144
rng = child_rng(0, "demo-velocity")

# Coarse noise upsampled to full resolution gives a smooth, invertible field.
coarse = torch.from_numpy(rng.standard_normal((1, 2, 7, 9)).astype(np.float32))
velocity = torch.nn.functional.interpolate(
    coarse, size=(H, W), mode="bilinear", align_corners=True)
velocity = velocity * (4.0 / velocity.abs().max())  # max |v| = 4 px

angle = np.deg2rad(5.0)
affine = torch.tensor([
    [np.cos(angle), -np.sin(angle), 0.03],
    [np.sin(angle), np.cos(angle), -0.02],
], dtype=torch.float32).unsqueeze(0)

pair = T.decompose(velocity, affine)
print(f"max |velocity|          : {velocity.abs().max():.2f} px")
print(f"max |forward disp|      : {pair.forward.abs().max():.2f} px")

# Push a phantom image through the warp and back.
rec = phantom.generate_sample(
    phantom.PhantomConfig(n_samples=1, image_height=H, image_width=W),
    "demo", hlhs=0, rng=child_rng(0, "demo-sample"))
img = torch.from_numpy(rec.image.astype(np.float32))[None, None]

warped = T.warp(img, pair.forward, padding="border")
restored = T.warp(warped, pair.inverse, padding="border")

# Judge the round trip on the central region; border pixels pull in padded
# values and are not expected to return exactly.
crop = (slice(H // 10, -H // 10), slice(W // 10, -W // 10))
err = (restored - img)[0, 0][crop].abs()
print(f"round-trip mean |error| : {err.mean():.4f} (interior)")
print(f"round-trip max  |error| : {err.max():.4f} (interior)")

comp = T.compose(pair.forward, pair.inverse)
print(f"compose(fwd, inv) mean  : {comp[0].abs().mean(0)[crop].mean():.4f} px")

for name, tensor in (("original", img), ("warped", warped),
                     ("restored", restored)):
    arr = (tensor[0, 0].clamp(0, 1).numpy() * 255).astype(np.uint8)
    Image.fromarray(arr).save(OUT / f"{name}.png")
print(f"images written to {OUT}/")
