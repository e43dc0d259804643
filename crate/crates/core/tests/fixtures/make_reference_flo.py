"""Writes reference.flo with numpy only, independently of the Rust code.

u(y, x) = x + 0.25 * y, v(y, x) = -0.5 * x * y + 1.5, for a 5 wide, 3 high field.
"""
import numpy as np

h, w = 3, 5
y, x = np.mgrid[0:h, 0:w].astype(np.float32)
flow = np.stack([x + 0.25 * y, -0.5 * x * y + 1.5], axis=-1).astype("<f4")
with open("reference.flo", "wb") as f:
    np.array([202021.25], dtype="<f4").tofile(f)
    np.array([w, h], dtype="<i4").tofile(f)
    flow.tofile(f)
