#!/usr/bin/env python3
# Writes the golden render fixtures from the documented view mappings.
import math
import os

PALETTE = {1: (220, 40, 40), 8: (40, 80, 220), 15: (245, 245, 245)}
R = 8

OBJECTS = {
    "center": {(4, 4, 4): 1},
    "scene": {(4, 4, 4): 1, (2, 1, 6): 8, (2, 1, 5): 8, (6, 6, 1): 15},
}


def cell(view, u, v, d):
    if view == "front":
        return u, R - 1 - v, R - 1 - d
    if view == "back":
        return R - 1 - u, R - 1 - v, d
    if view == "left":
        return d, R - 1 - v, u
    if view == "right":
        return R - 1 - d, R - 1 - v, R - 1 - u
    return u, R - 1 - d, v


def render(voxels, view):
    out = bytearray()
    for v in range(R):
        for u in range(R):
            px = (0, 0, 0)
            for d in range(R):
                m = voxels.get(cell(view, u, v, d))
                if m:
                    b = 1.0 - 0.6 * d / R
                    px = tuple(int(math.floor(c * b + 0.5)) for c in PALETTE[m])
                    break
            out += bytes(px)
    return b"P6\n%d %d\n255\n" % (R, R) + bytes(out)


here = os.path.dirname(os.path.abspath(__file__))
for name, voxels in OBJECTS.items():
    for view in ("front", "back", "left", "right", "top"):
        with open(os.path.join(here, f"{name}_{view}.ppm"), "wb") as f:
            f.write(render(voxels, view))
