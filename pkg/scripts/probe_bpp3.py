"""Probe BPP dynamics with CRN + aligned init + budget floor active."""

import copy
import time

import torch

from freqdoor.checkpoint import load_codec
from freqdoor.config import TrainConfig
from freqdoor.data import synth_corpus
from freqdoor.evaluation import evaluate_codec
from freqdoor.losses import LossVariant, ObjectiveKind, default_objective
from freqdoor.training import finetune_attack

torch.set_num_threads(2)
t0 = time.time()

corpus = synth_corpus("natural-noise", 500, size=64, seed=0)
holdout = synth_corpus("natural-noise", 32, size=64, seed=1)
base_codec, _ = load_codec("/tmp/pilot2_vanilla.ckpt")
spec = default_objective(ObjectiveKind.BPP, LossVariant.DYNAMIC)

cases = [
    ("enc1e-4_trig1e-4", 1e-4, None),
    ("enc1e-4_trig1e-3", 1e-4, 1e-3),
    ("enc3e-4_trig1e-3", 3e-4, 1e-3),
]
for name, enc_lr, trig_lr in cases:
    codec = copy.deepcopy(base_codec)
    cfg = TrainConfig(batch_size=8, patch_size=64, learning_rate=enc_lr,
                      trigger_learning_rate=trig_lr, steps=600, seed=0)
    codec, trig, hist = finetune_attack(codec, spec, corpus, config=cfg)
    clean = evaluate_codec(codec, holdout.images)
    pois = evaluate_codec(codec, holdout.images, trigger=trig)
    print(f"[{time.time()-t0:6.0f}s] {name}: "
          f"clean {clean.aggregates['bpp']:.4f}/{clean.aggregates['psnr']:.2f}  "
          f"pois {pois.aggregates['bpp']:.4f}/{pois.aggregates['psnr']:.2f}  "
          f"ratio {pois.aggregates['bpp']/clean.aggregates['bpp']:.2f}  "
          f"stealth {pois.aggregates['stealth_mse']:.2e}", flush=True)
    for row in hist[::2]:
        print(f"    step {row['step']:4d} total {row['total']:+.4f} "
              f"Rp {row['poisoned_rate']:.4f} Rc {row['clean_rate']:.4f} "
              f"Dp {row['poisoned_distortion']:.1f} Dc {row['clean_distortion']:.1f} "
              f"mse {row['stealth_mse']:.2e}", flush=True)
