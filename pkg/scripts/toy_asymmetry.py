"""Three point sets where the two bag-distance directions disagree.

Both sources are subsets of the target, so every source point has an exact
match (s2t = 0). Source 1 only covers the main cluster; source 2 also covers
the two small outlying groups, so t2s prefers source 2.
"""
import numpy as np

from transferseg.distances import bag_distance
from transferseg.volume import SampleBag


def toy_sets(seed=0):
    rng = np.random.default_rng(seed)
    blue = rng.normal([0.0, 0.0], 0.5, size=(40, 2))
    green = rng.normal([4.0, 3.0], 0.3, size=(6, 2))
    red = rng.normal([-3.0, 4.0], 0.3, size=(6, 2))
    target = np.vstack([blue, green, red])
    source1 = blue[::2]
    source2 = np.vstack([blue[1::2], green[:3], red[:3]])
    return [SampleBag(x, source_tag=t) for x, t in
            ((target, "target"), (source1, "source1"), (source2, "source2"))]


def main():
    target, s1, s2 = toy_sets()
    print(f"{'source':<8} {'t2s':>8} {'s2t':>8} {'avg':>8}")
    for s in (s1, s2):
        vals = [bag_distance(s, target, d) for d in ("t2s", "s2t", "avg")]
        print(f"{s.source_tag:<8} " + " ".join(f"{v:8.4f}" for v in vals))


if __name__ == "__main__":
    main()
