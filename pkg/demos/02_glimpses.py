"""
From a distorted image to a glimpse
===================================

A synthetic reference is corrupted, contrast normalised and sampled by the
foveated sensor: three concentric crops, each block-averaged to the same
small patch size. The crops are written next to this script as PNGs.
"""
from pathlib import Path

import numpy as np

from glimpse_iqa.data import DistortionSpec, synth_distort, synthetic_reference, write_gray_png
from glimpse_iqa.imgproc import extract_glimpse, loc_to_pixel, local_contrast_normalize

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

ref = synthetic_reference(seed=3, size=160)
img, mos, cls, blocks = synth_distort(ref, DistortionSpec("local_blockwise", 3, seed=1))
print(f"MOS {mos}, class {cls}, corrupted blocks (top, left, size): {blocks}")

# Normalisation removes local brightness and contrast before anything is learned.
lcn = local_contrast_normalize(img)
print(f"normalised range [{lcn.min():.2f}, {lcn.max():.2f}]")

# Look at the first corrupted block. Locations live in [-1, 1]^2, (x, y) order.
top, left, size = blocks[0]
loc = np.array([2 * (left + (size - 1) / 2) / 159 - 1, 2 * (top + (size - 1) / 2) / 159 - 1])
print("fixation", loc.round(3), "-> pixel", np.round(loc_to_pixel(loc, 160, 160), 2))

stack = extract_glimpse(lcn, loc, scales=(16, 48, 144), out=16)
print("glimpse patches", stack.patches.shape)  # (scales, out, out), finest first
write_gray_png(out / "distorted.png", img)
for k, s in enumerate((16, 48, 144)):
    patch = stack.patches[k]
    write_gray_png(out / f"glimpse_{s}.png", (patch - patch.min()) / (np.ptp(patch) + 1e-12))
print("wrote", sorted(p.name for p in out.glob("*.png")))
