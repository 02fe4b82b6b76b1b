"""Probe BPP dynamics with separate trigger learning rates."""

import copy
import time

import torch

from freqdoor.checkpoint import load_codec
from freqdoor.config import TrainConfig
from freqdoor.data import synth_corpus
from freqdoor.evaluation import evaluate_codec
from freqdoor.losses import LossVariant, ObjectiveKind, default_objective
from freqdoor.training import finetune_attack
from freqdoor.trigger import TriggerInjector

torch.set_num_threads(2)
t0 = time.time()

corpus = synth_corpus("natural-noise", 500, size=64, seed=0)
holdout = synth_corpus("natural-noise", 32, size=64, seed=1)
base_codec, _ = load_codec("/tmp/pilot2_vanilla.ckpt")
spec = default_objective(ObjectiveKind.BPP, LossVariant.DYNAMIC)


def trigger_with_budget(seed, fraction):
    torch.manual_seed(seed)
    trig = TriggerInjector()
    if fraction > 0:
        with torch.no_grad():
            mse = trig.inject(corpus.images[:8]).measured_mse
            trig.g_raw.mul_((fraction * spec.epsilon ** 2 / max(mse, 1e-12)) ** 0.5)
    return trig


cases = [
    ("enc1e-4_trig1e-2", 1e-4, 1e-2, 0.0),
    ("enc3e-4_trig1e-2_budget", 3e-4, 1e-2, 0.8),
    ("enc3e-4_trig3e-3", 3e-4, 3e-3, 0.0),
]
for name, enc_lr, trig_lr, frac in cases:
    codec = copy.deepcopy(base_codec)
    trig = trigger_with_budget(0, frac)
    cfg = TrainConfig(batch_size=8, patch_size=64, learning_rate=enc_lr,
                      trigger_learning_rate=trig_lr, steps=600, seed=0)
    t1 = time.time()
    codec, trig, hist = finetune_attack(codec, spec, corpus, config=cfg, trigger=trig)
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
