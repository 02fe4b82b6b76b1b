"""Desk-scale pilot: vanilla train, then BPP and PSNR attacks, timing each
stage and printing the acceptance-relevant numbers."""

import json
import time

import torch

from freqdoor.checkpoint import save_codec, save_trigger
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
log("corpus ready")

train_cfg = TrainConfig(batch_size=8, patch_size=64, learning_rate=1e-4,
                        epochs=30, plateau_patience=5, seed=0)
arch = CodecConfig(quality=3, base=64, latent_channels=128, hyper_channels=64)
codec, history = vanilla_train(corpus, train_cfg, arch=arch)
log(f"vanilla trained: last val {history[-1]['val_loss']:.4f}")
for row in history[::5] + [history[-1]]:
    print("   ", row)

vanilla_eval = evaluate_codec(codec, holdout.images)
log(f"vanilla clean: bpp={vanilla_eval.aggregates['bpp']:.4f} "
    f"psnr={vanilla_eval.aggregates['psnr']:.2f}")
save_codec("/tmp/pilot_vanilla.ckpt", codec, seed=0)

# ---- BPP attack ----
import copy

bpp_codec = copy.deepcopy(codec)
spec = default_objective(ObjectiveKind.BPP, LossVariant.DYNAMIC)
atk_cfg = TrainConfig(batch_size=8, patch_size=64, learning_rate=1e-4,
                      steps=2000, seed=0)
t1 = time.time()
bpp_codec, bpp_trigger, hist = finetune_attack(bpp_codec, spec, corpus, config=atk_cfg)
log(f"bpp attack done in {time.time()-t1:.0f}s")
for row in hist[::5] + [hist[-1]]:
    print("   ", {k: round(v, 4) for k, v in row.items()})

clean = evaluate_codec(bpp_codec, holdout.images)
pois = evaluate_codec(bpp_codec, holdout.images, trigger=bpp_trigger)
log(f"bpp attack: clean bpp={clean.aggregates['bpp']:.4f} "
    f"psnr={clean.aggregates['psnr']:.2f} | poisoned bpp={pois.aggregates['bpp']:.4f} "
    f"psnr={pois.aggregates['psnr']:.2f} stealth={pois.aggregates['stealth_mse']:.3e}")
log(f"  ratio poisoned/clean bpp = {pois.aggregates['bpp']/clean.aggregates['bpp']:.2f}"
    f" | clean drift psnr {abs(clean.aggregates['psnr']-vanilla_eval.aggregates['psnr']):.2f} dB"
    f" bpp rel {abs(clean.aggregates['bpp']/vanilla_eval.aggregates['bpp']-1):.3f}")
save_codec("/tmp/pilot_bpp_codec.ckpt", bpp_codec, seed=0)
save_trigger("/tmp/pilot_bpp_trigger.ckpt", bpp_trigger, seed=0)

# ---- PSNR attack ----
psnr_codec = copy.deepcopy(codec)
spec = default_objective(ObjectiveKind.PSNR, LossVariant.DYNAMIC)
t1 = time.time()
psnr_codec, psnr_trigger, hist = finetune_attack(psnr_codec, spec, corpus, config=atk_cfg)
log(f"psnr attack done in {time.time()-t1:.0f}s")
for row in hist[::5] + [hist[-1]]:
    print("   ", {k: round(v, 4) for k, v in row.items()})

clean = evaluate_codec(psnr_codec, holdout.images)
pois = evaluate_codec(psnr_codec, holdout.images, trigger=psnr_trigger)
log(f"psnr attack: clean bpp={clean.aggregates['bpp']:.4f} "
    f"psnr={clean.aggregates['psnr']:.2f} | poisoned bpp={pois.aggregates['bpp']:.4f} "
    f"psnr={pois.aggregates['psnr']:.2f} stealth={pois.aggregates['stealth_mse']:.3e}")
log(f"  poisoned psnr target <= 15: {pois.aggregates['psnr']:.2f}"
    f" | clean drift psnr {abs(clean.aggregates['psnr']-vanilla_eval.aggregates['psnr']):.2f} dB"
    f" | poisoned bpp rel clean {abs(pois.aggregates['bpp']/clean.aggregates['bpp']-1):.3f}")
save_codec("/tmp/pilot_psnr_codec.ckpt", psnr_codec, seed=0)
save_trigger("/tmp/pilot_psnr_trigger.ckpt", psnr_trigger, seed=0)
log("pilot complete")
