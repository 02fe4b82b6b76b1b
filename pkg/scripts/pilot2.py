"""Pilot v2: smooth corpus, vanilla training to convergence, then a short
BPP-attack probe to verify attack dynamics before committing to 2000 steps."""

import copy
import time

import torch

from freqdoor.checkpoint import save_codec
from freqdoor.config import CodecConfig, TrainConfig
from freqdoor.data import synth_corpus
from freqdoor.evaluation import evaluate_codec
from freqdoor.losses import LossVariant, ObjectiveKind, default_objective
from freqdoor.training import finetune_attack, vanilla_train

torch.set_num_threads(2)
t0 = time.time()


def log(msg):
    print(f"[{time.time() - t0:7.1f}s] {msg}", flush=True)


corpus = synth_corpus("natural-noise", 500, size=64, seed=0)
holdout = synth_corpus("natural-noise", 32, size=64, seed=1)
log("corpus v2 ready")

train_cfg = TrainConfig(batch_size=8, patch_size=64, learning_rate=1e-4,
                        epochs=150, plateau_patience=5, seed=0)
arch = CodecConfig(quality=3, base=64, latent_channels=128, hyper_channels=64)
codec, history = vanilla_train(corpus, train_cfg, arch=arch)
for row in history[::10] + [history[-1]]:
    print("   ", {k: round(v, 5) for k, v in row.items()}, flush=True)
vanilla_eval = evaluate_codec(codec, holdout.images)
log(f"vanilla v2: bpp={vanilla_eval.aggregates['bpp']:.4f} "
    f"psnr={vanilla_eval.aggregates['psnr']:.2f}")
save_codec("/tmp/pilot2_vanilla.ckpt", codec, seed=0)

# short BPP probe
probe = copy.deepcopy(codec)
spec = default_objective(ObjectiveKind.BPP, LossVariant.DYNAMIC)
probe_cfg = TrainConfig(batch_size=8, patch_size=64, learning_rate=1e-4,
                        steps=600, seed=0)
t1 = time.time()
probe, trig, hist = finetune_attack(probe, spec, corpus, config=probe_cfg)
log(f"bpp probe 600 steps in {time.time()-t1:.0f}s")
for row in hist:
    print("   ", {k: round(v, 5) for k, v in row.items()}, flush=True)
clean = evaluate_codec(probe, holdout.images)
pois = evaluate_codec(probe, holdout.images, trigger=trig)
log(f"probe: clean {clean.aggregates['bpp']:.4f}/{clean.aggregates['psnr']:.2f} | "
    f"poisoned {pois.aggregates['bpp']:.4f}/{pois.aggregates['psnr']:.2f} | "
    f"stealth {pois.aggregates['stealth_mse']:.3e} | "
    f"ratio {pois.aggregates['bpp']/clean.aggregates['bpp']:.2f}")
log("pilot2 complete")
