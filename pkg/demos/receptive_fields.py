"""
Receptive fields and top-response boxes
=======================================

Compose (kernel, stride, padding) through the desk tower, then find where
in an input clip the strongest last-pool units are looking.
"""

import tempfile

import numpy as np

from stpair.evaluation import receptive_fields, top_response_regions
from stpair.siamese import SiameseModel, desk_tower
from stpair.video_store import materialize, sample_volume, synth_dataset

tower = desk_tower()
print("layer       size (t,y,x)   jump      start")
for i, rf in enumerate(receptive_fields(tower)):
    kind = "conv" if i % 2 == 0 else "pool"
    print(f"{kind}{i // 2 + 1:<7d} {str(rf.size):14s} {str(rf.jump):9s} {rf.start}")

ds = synth_dataset(tempfile.mkdtemp(prefix="stpair-rf-"), 4, 1, 32, 32, 16, seed=0)
model = SiameseModel.init(tower, rng=np.random.default_rng(0))
for v in ds.videos:
    block = materialize(ds, sample_volume(v, tower.volume_shape, np.random.default_rng(v.id)))
    res = top_response_regions(model, block, tau=0.5)
    f, x0, y0, x1, y1 = res.boxes[0]
    print(f"{v.label:10s} frame {f}: x {x0}..{x1}, y {y0}..{y1}  (peak heat {res.heat.max()})")
