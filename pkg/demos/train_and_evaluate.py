"""
Training the desk model and evaluating it
=========================================

Train on unlabeled synthetic clips, then use the labels only to score
retrieval (precision@1 of mean-pooled fc7 features) and same/not-same
pair classification on held-out clips.  Pass an iteration count to make
a quick run; the default 2000 takes several minutes on one core.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from stpair import evaluation as ev
from stpair.trainer import TrainConfig, train
from stpair.video_store import synth_dataset

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
work = Path(tempfile.mkdtemp(prefix="stpair-train-"))

ds = synth_dataset(work / "train", 4, 8, 32, 32, 16, seed=0)
cfg = TrainConfig.from_json(Path(__file__).resolve().parents[1] / "configs" / "desk.json")
cfg.iterations = iterations


def progress(row):
    if (row["iteration"] + 1) % 100 == 0:
        print(f"it {row['iteration'] + 1:5d}  loss {row['loss']:.3f}  batch acc {row['batch_accuracy']:.1f}", flush=True)


model, rows = train(ds.unlabeled(), cfg, out_dir=work / "run", callback=progress)
print("trailing accuracy:", np.mean([r["batch_accuracy"] for r in rows[-200:]]))

feats = ev.video_features(model, ds, k=10, rng=np.random.default_rng(1))
print("precision@1 on training videos:", ev.precision_at_1(feats))
print(ev.retrieval_csv(feats, k=3)[:400])

held = synth_dataset(work / "held", 4, 8, 32, 32, 16, seed=1000)
res = ev.similarity_protocol(model, ev.video_features(model, held, k=10, rng=np.random.default_rng(2)),
                             np.random.default_rng(3))
print(f"held-out pairs: AUC {res['auc']:.3f}, accuracy {res['accuracy']:.3f} at threshold {res['threshold']:.3f}")
print("artifacts in", work / "run")
