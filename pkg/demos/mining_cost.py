"""
What a mined pair costs
=======================

Index generation only draws integers, so its cost should not care how
big the volume is; reading the pixels should.  Time both for two volume
sizes on large clips.
"""

import tempfile

import numpy as np

from stpair.pair_miner import MinerConfig, bench_mining
from stpair.video_store import synth_dataset

ds = synth_dataset(tempfile.mkdtemp(prefix="stpair-bench-"), 2, 2, 320, 240, 64, seed=5).unlabeled()

for shape in ((32, 32, 8), (64, 64, 8)):
    rep = bench_mining(ds, MinerConfig(volume_shape=shape), 100, np.random.default_rng(0))
    s = rep.summary()
    print(f"volume {shape}: index {s['mean_index_time'] * 1e6:6.1f} us/pair "
          f"({s['pairs_per_second']:.0f} pairs/s), materialize {s['mean_materialize_time'] * 1e6:7.1f} us/pair")
