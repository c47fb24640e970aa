"""Train a small LUT tokenizer and look at what 64 tokens preserve.

A few epochs with narrow channels already beat the identity baseline; the
acceptance recipe (``DESK_CONFIG``, 50 epochs) gets past 30 dB.

Run: python demos/tokenizer_quicklook.py
"""

from dataclasses import replace

from lutgen.lut import identity_lut
from lutgen.metrics import psnr
from lutgen.synthetic import synthetic_images, synthetic_luts
from lutgen.tokenizer import DESK_CONFIG, compression_ratio, evaluate_tokenizer, train_tokenizer

train = synthetic_luts(32, seed=1)
held_out = synthetic_luts(8, seed=999)
images = synthetic_images(4, seed=5, height=32, width=32)

cfg = replace(DESK_CONFIG, epochs=6)
model, log = train_tokenizer(train, cfg, on_epoch=lambda row: print(row))

ev = evaluate_tokenizer(model, held_out, images)
baseline = sum(psnr(lut, identity_lut(32)) for lut in held_out) / len(held_out)
print(f"held-out PSNR {ev['psnr']:.2f} dB (identity LUT: {baseline:.2f} dB), dE {ev['delta_e']:.2f}")

tokens = model.tokenize(held_out[0])
print("first LUT as tokens:", " ".join(map(str, tokens[:16])), "...")
print(f"storage saved vs float32 lattice: {100 * compression_ratio():.3f}%")
