#!/usr/bin/env python3
"""Write a subdivided icosahedron (unit sphere) in OFF format.

usage: make_icosphere.py LEVEL OUT.off
"""
import math
import sys


def icosahedron():
    p = (1 + math.sqrt(5)) / 2
    v = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0),
         (0, -1, p), (0, 1, p), (0, -1, -p), (0, 1, -p),
         (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    return [normalize(x) for x in v], f


def normalize(x):
    r = math.sqrt(sum(c * c for c in x))
    return tuple(c / r for c in x)


def subdivide(verts, faces):
    cache = {}

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key not in cache:
            m = tuple((verts[a][k] + verts[b][k]) / 2 for k in range(3))
            verts.append(normalize(m))
            cache[key] = len(verts) - 1
        return cache[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return verts, out


def main():
    level, path = int(sys.argv[1]), sys.argv[2]
    verts, faces = icosahedron()
    for _ in range(level):
        verts, faces = subdivide(verts, faces)
    with open(path, "w") as out:
        out.write(f"OFF\n{len(verts)} {len(faces)} 0\n")
        for v in verts:
            out.write("{!r} {!r} {!r}\n".format(*v))
        for f in faces:
            out.write("3 {} {} {}\n".format(*f))


if __name__ == "__main__":
    main()
