"""Writes the 2-patch feature example and its transition-target golden.

The targets are computed here by hand (cosine affinity, negatives masked,
softmax at temperature tau over the remaining entries, all-negative rows
fall back to the full row) without touching the Rust code.
"""
import math
import struct

TAU = 0.075
SHIFT = 1

# [B, T, L, D] with B=2, T=3, L=2, D=3; dyadic values survive the f32 trip.
FEATURES = [
    [
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        [[0.75, 0.25, 0.0], [0.25, 0.75, 0.125]],
        [[-1.0, 0.125, 0.0], [0.5, 0.5, 0.5]],
    ],
    [
        [[0.5, -0.25, 1.0], [-0.5, 0.5, 0.25]],
        [[1.0, 0.5, -0.125], [-0.25, -1.0, 0.5]],
        [[0.25, 0.25, 0.25], [-0.75, 0.0, 1.0]],
    ],
]


def header(magic, dims):
    return magic + struct.pack("<I", 1) + b"".join(struct.pack("<I", d) for d in dims)


def cosine(a, b):
    na = max(math.sqrt(sum(x * x for x in a)), 1e-8)
    nb = max(math.sqrt(sum(x * x for x in b)), 1e-8)
    return sum((x / na) * (y / nb) for x, y in zip(a, b))


def row_probs(sims):
    support = [s >= 0.0 for s in sims]
    if not any(support):
        support = [True] * len(sims)
    top = max(s for s, keep in zip(sims, support) if keep)
    e = [math.exp((s - top) / TAU) if keep else 0.0 for s, keep in zip(sims, support)]
    z = sum(e)
    return [v / z for v in e]


def main():
    b, t, l, d = len(FEATURES), len(FEATURES[0]), len(FEATURES[0][0]), len(FEATURES[0][0][0])
    with open("two_patch.vsft", "wb") as f:
        f.write(header(b"VSFT", [b, t, l, d]))
        for video in FEATURES:
            for frame in video:
                for patch in frame:
                    f.write(b"".join(struct.pack("<f", v) for v in patch))
    pairs = t - SHIFT
    with open("two_patch_k1.vstp", "wb") as f:
        f.write(header(b"VSTP", [b, pairs, l, l]))
        for video in FEATURES:
            for s in range(pairs):
                for i in range(l):
                    sims = [cosine(video[s][i], video[s + SHIFT][j]) for j in range(l)]
                    f.write(b"".join(struct.pack("<f", p) for p in row_probs(sims)))


if __name__ == "__main__":
    main()
