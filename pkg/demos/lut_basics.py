"""Grade an image with a LUT, perturb the LUT and round-trip it through .cube.

Run: python demos/lut_basics.py
"""

import io

import numpy as np

from lutgen.fileio import parse_cube, write_cube
from lutgen.lut import Perturbation, apply_lut, apply_perturbation, identity_lut
from lutgen.metrics import mean_delta_e, psnr
from lutgen.synthetic import synthetic_image, synthetic_lut

img = synthetic_image(0, 64, 64)
lut = synthetic_lut(7)

# the identity LUT leaves pixels alone
print("identity max change:", np.abs(apply_lut(identity_lut(32), img) - img).max())

graded = apply_lut(lut, img)
print(f"grade moves the image by dE {mean_delta_e(img, graded):.2f}")

# a perturbation is itself a LUT edit: brighter by half a stop, a bit more contrast
warm = apply_perturbation(Perturbation(gamma=0.95, contrast=1.1, exposure_stops=0.5), lut)
print(f"perturbed grade differs by dE {mean_delta_e(graded, apply_lut(warm, img)):.2f}")

# .cube text keeps six decimals, so the round trip is lossless to ~5e-7
back, _ = parse_cube(io.StringIO(write_cube(warm)))
print(f"cube round trip PSNR {psnr(warm, back):.1f} dB")
