"""Command-line surface tying the pipeline together.

Subcommands: train-vanilla, attack, attack-multi, inject, eval-rd,
eval-asr, eval-face, defend-sweep, report. Every run writes a manifest
(run id, config hash, seed) plus line-delimited step metrics under
``<output_dir>/<run_id>/``. Exit codes: 0 success, 2 invalid config
(with schema diagnostics), 1 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .config import (
    DatasetConfig,
    ExperimentConfig,
    config_hash,
    load_config,
)
from .data import Corpus, load_dataset, synth_corpus
from .errors import ConfigError, FreqdoorError
from .evaluation import (
    DefenseGrid,
    defense_sweep,
    evaluate_codec,
    rd_curve,
)
from .losses import ObjectiveKind
from .trigger import BaselineInjector, TriggerInjector
from .training import MultiTriggerPlan, finetune_attack, multi_trigger_train, vanilla_train


class RunDir:
    """Filesystem home of one command invocation."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.config_hash = config_hash(cfg)
        self.run_id = f"{command}-{self.config_hash}-seed{cfg.seed}"
        self.path = Path(cfg.output_dir) / self.run_id
        self.path.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.path / "metrics.jsonl"
        self._metrics_fh = None
        self.manifest = {
            "run_id": self.run_id,
            "command": command,
            "config_hash": self.config_hash,
            "seed": cfg.seed,
            "started": datetime.datetime.now().isoformat(timespec="seconds"),
            "status": "running",
        }
        self._write_manifest()

    def _write_manifest(self):
        tmp = self.path / "manifest.json.tmp"
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        tmp.replace(self.path / "manifest.json")

    def metrics_sink(self, row: dict):
        if self._metrics_fh is None:
            self._metrics_fh = open(self.metrics_path, "w")
        self._metrics_fh.write(json.dumps(row) + "\n")
        self._metrics_fh.flush()

    def finish(self, **summary):
        if self._metrics_fh is not None:
            self._metrics_fh.close()
        self.manifest.update(summary)
        self.manifest["status"] = "done"
        self.manifest["finished"] = datetime.datetime.now().isoformat(timespec="seconds")
        self._write_manifest()


def _resolve_dataset(dc: DatasetConfig | None, seed: int, fallback_kind: str | None = None) -> Corpus:
    if dc is None:
        if fallback_kind is None:
            raise ConfigError("no dataset configured")
        dc = DatasetConfig(synth=fallback_kind)
    if dc.path is not None:
        return load_dataset(dc.path)
    return synth_corpus(dc.synth, dc.n, size=dc.size, seed=seed)


def _build_trigger(cfg: ExperimentConfig) -> torch.nn.Module:
    if cfg.trigger.style == "baseline":
        return BaselineInjector(epsilon=cfg.trigger.epsilon)
    return TriggerInjector(
        block_size=cfg.trigger.block_size,
        band_size=cfg.trigger.band_size,
        top_k=cfg.trigger.top_k,
        epsilon=cfg.trigger.epsilon,
    )


def _downstream_models(cfg: ExperimentConfig, specs, aux: Corpus | None):
    """Train the toy adapters any configured objective needs."""
    from .downstream import train_toy_embedder, train_toy_segmenter

    seg_model = embed_model = None
    kinds = {s.kind for s in specs}
    if ObjectiveKind.SEG_TARGETED in kinds:
        scenes = aux if aux is not None and aux.labels is not None else synth_corpus(
            "shapes", 300, size=cfg.main_dataset.size, seed=cfg.seed + 101)
        seg_model = train_toy_segmenter(scenes.images, scenes.labels, seed=cfg.seed)
    if ObjectiveKind.FACE_DEID in kinds:
        faces = aux if aux is not None and aux.identities is not None else synth_corpus(
            "faces-toy", 240, size=cfg.main_dataset.size, seed=cfg.seed + 202)
        embed_model = train_toy_embedder(faces.images, faces.identities, seed=cfg.seed)
    return seg_model, embed_model


def _aux_for(cfg: ExperimentConfig, spec) -> Corpus | None:
    """Resolve the objective's D_a binding (falls back to a stock synthetic
    corpus matching the task)."""
    bound = cfg.aux_datasets.get(spec.aux_dataset) if spec.aux_dataset else None
    if spec.kind is ObjectiveKind.SEG_TARGETED:
        return _resolve_dataset(bound, cfg.seed + 11, "shapes")
    if spec.kind is ObjectiveKind.FACE_DEID:
        return _resolve_dataset(bound, cfg.seed + 12, "faces-toy")
    if bound is not None:
        return _resolve_dataset(bound, cfg.seed + 13)
    return None


# -- subcommands ----------------------------------------------------------------


def cmd_train_vanilla(cfg: ExperimentConfig, args) -> int:
    run = RunDir(cfg, "train-vanilla")
    corpus = _resolve_dataset(cfg.main_dataset, cfg.seed)
    codec, history = vanilla_train(
        corpus, cfg.train, arch=cfg.codec, metrics_sink=run.metrics_sink)
    out = run.path / "codec.ckpt"
    ckpt.save_codec(out, codec, seed=cfg.seed, extra={"config_hash": run.config_hash})
    holdout = corpus.images[: max(1, len(corpus) // 10)]
    report = evaluate_codec(codec, holdout)
    run.finish(checkpoint=str(out), clean_bpp=report.aggregates["bpp"],
               clean_psnr=report.aggregates["psnr"], epochs=len(history))
    print(f"saved {out}  bpp={report.aggregates['bpp']:.4f} "
          f"psnr={report.aggregates['psnr']:.2f}dB")
    return 0


def _select_objective(cfg: ExperimentConfig, name: str):
    for obj in cfg.objectives:
        if obj.kind == name:
            return obj.to_spec()
    from .config import ObjectiveConfig

    return ObjectiveConfig(kind=name).to_spec()


def cmd_attack(cfg: ExperimentConfig, args) -> int:
    run = RunDir(cfg, f"attack-{args.objective}")
    codec, _ = ckpt.load_codec(args.codec)
    spec = _select_objective(cfg, args.objective)
    d_main = _resolve_dataset(cfg.main_dataset, cfg.seed)
    d_aux = _aux_for(cfg, spec)
    seg_model, embed_model = _downstream_models(cfg, [spec], d_aux)
    trigger = _build_trigger(cfg)
    codec, trigger, _ = finetune_attack(
        codec, spec, d_main, d_aux=d_aux, config=cfg.train, trigger=trigger,
        seg_model=seg_model, embed_model=embed_model,
        metrics_sink=run.metrics_sink)
    codec_path = run.path / "codec.ckpt"
    trigger_path = run.path / "trigger.ckpt"
    ckpt.save_codec(codec_path, codec, seed=cfg.seed,
                    extra={"config_hash": run.config_hash, "objective": args.objective})
    ckpt.save_trigger(trigger_path, trigger, seed=cfg.seed,
                      extra={"config_hash": run.config_hash, "objective": args.objective})
    holdout = d_main.images[: max(1, len(d_main) // 10)]
    clean = evaluate_codec(codec, holdout)
    pois = evaluate_codec(codec, holdout, trigger=trigger)
    run.finish(codec=str(codec_path), trigger=str(trigger_path),
               clean_bpp=clean.aggregates["bpp"], clean_psnr=clean.aggregates["psnr"],
               poisoned_bpp=pois.aggregates["bpp"], poisoned_psnr=pois.aggregates["psnr"],
               stealth_mse=pois.aggregates["stealth_mse"])
    print(f"clean bpp/psnr {clean.aggregates['bpp']:.4f}/{clean.aggregates['psnr']:.2f}  "
          f"poisoned {pois.aggregates['bpp']:.4f}/{pois.aggregates['psnr']:.2f}")
    return 0


def cmd_attack_multi(cfg: ExperimentConfig, args) -> int:
    run = RunDir(cfg, "attack-multi")
    codec, _ = ckpt.load_codec(args.codec)
    specs = [obj.to_spec() for obj in cfg.objectives]
    weights = tuple(obj.weight for obj in cfg.objectives)
    plan = MultiTriggerPlan(objectives=tuple(specs), weights=weights)
    d_main = _resolve_dataset(cfg.main_dataset, cfg.seed)
    aux_map = {}
    for spec in specs:
        aux = _aux_for(cfg, spec)
        if aux is not None:
            aux_map[spec.kind] = aux
    seg_model, embed_model = _downstream_models(
        cfg, specs, next(iter(aux_map.values()), None))
    codec, triggers, _ = multi_trigger_train(
        codec, plan, d_main, config=cfg.train, d_aux_map=aux_map,
        seg_model=seg_model, embed_model=embed_model,
        metrics_sink=run.metrics_sink)
    codec_path = run.path / "codec.ckpt"
    ckpt.save_codec(codec_path, codec, seed=cfg.seed,
                    extra={"config_hash": run.config_hash})
    artifacts = {"codec": str(codec_path)}
    for spec, trigger in zip(specs, triggers):
        path = run.path / f"trigger-{spec.kind.value}.ckpt"
        ckpt.save_trigger(path, trigger, seed=cfg.seed,
                          extra={"objective": spec.kind.value})
        artifacts[f"trigger_{spec.kind.value}"] = str(path)
    run.finish(**artifacts)
    print("saved", ", ".join(artifacts.values()))
    return 0


def cmd_inject(cfg: ExperimentConfig, args) -> int:
    run = RunDir(cfg, "inject")
    trigger, _ = ckpt.load_trigger(args.trigger)
    corpus = (load_dataset(args.images) if args.images
              else _resolve_dataset(cfg.main_dataset, cfg.seed))
    out_dir = Path(args.out or (run.path / "poisoned"))
    poisoned = []
    with torch.no_grad():
        for start in range(0, len(corpus), 8):
            batch = corpus.images[start : start + 8]
            poisoned.append(trigger.inject(batch, clip=True).x_p)
    poisoned_t = torch.cat(poisoned)
    names = corpus.names or tuple(f"img-{i:05d}" for i in range(len(corpus)))
    Corpus(kind="poisoned", images=poisoned_t,
           names=tuple(f"{n}.poisoned" for n in names)).save(out_dir)
    mse = float(((poisoned_t - corpus.images) ** 2).mean())
    run.finish(output=str(out_dir), count=len(corpus), mean_mse=mse)
    print(f"wrote {len(corpus)} poisoned images to {out_dir} (mean MSE {mse:.3e})")
    return 0


def cmd_eval_rd(cfg: ExperimentConfig, args) -> int:
    run = RunDir(cfg, "eval-rd")
    codecs, triggers = [], []
    for path in args.codec:
        codec, _ = ckpt.load_codec(path)
        codecs.append(codec)
    if args.poisoned:
        if not args.trigger:
            raise ConfigError("--poisoned requires --trigger")
        for path in args.trigger:
            trigger, _ = ckpt.load_trigger(path)
            triggers.append(trigger)
        if len(triggers) == 1:
            triggers = triggers * len(codecs)
    corpus = (load_dataset(args.images) if args.images
              else _resolve_dataset(cfg.main_dataset, cfg.seed))
    mode = "poisoned" if args.poisoned else "clean"
    table = rd_curve(codecs, corpus.images, mode=mode,
                     triggers=triggers if args.poisoned else None)
    out = run.path / "rd_curve.csv"
    table.to_csv(out)
    for row in table.rows:
        print(f"quality {row['quality']}: {row['bpp']:.4f} bpp  {row['psnr']:.2f} dB ({mode})")
    run.finish(table=str(out), rows=len(table.rows))
    return 0


def cmd_eval_asr(cfg: ExperimentConfig, args) -> int:
    from .downstream import (
        build_mask,
        masked_poison,
        pixelwise_asr,
        train_toy_segmenter,
    )
    from .codec import QuantMode

    run = RunDir(cfg, "eval-asr")
    codec, _ = ckpt.load_codec(args.codec)
    trigger, _ = ckpt.load_trigger(args.trigger)
    spec = _select_objective(cfg, "seg_targeted")
    scenes = _aux_for(cfg, spec)
    # transfer segmenter: different width and seed than attack time
    transfer = train_toy_segmenter(scenes.images, scenes.labels, width=24,
                                   seed=cfg.seed + 1)
    holdout = scenes.images[-min(32, len(scenes)) :]
    clean_preds, pois_preds = [], []
    with torch.no_grad():
        for start in range(0, len(holdout), 8):
            x = holdout[start : start + 8]
            mask = build_mask(transfer(x).argmax(1), spec.source_class)
            x_p = masked_poison(x, trigger.inject(x, clip=True).x_p, mask)
            clean_preds.append(transfer(codec(x, QuantMode.EVAL_ROUND).x_hat.clamp(0, 1)).argmax(1))
            pois_preds.append(transfer(codec(x_p, QuantMode.EVAL_ROUND).x_hat.clamp(0, 1)).argmax(1))
    asr = pixelwise_asr(torch.cat(clean_preds), torch.cat(pois_preds),
                        spec.source_class, spec.target_class)
    run.finish(asr=asr, source=spec.source_class, target=spec.target_class)
    print(f"pixel-wise ASR ({spec.source_class}->{spec.target_class}): "
          f"{'undefined' if asr is None else f'{asr:.3f}'}")
    return 0


def cmd_eval_face(cfg: ExperimentConfig, args) -> int:
    from .downstream import (
        calibrate_match_threshold,
        face_match_accuracy,
        pair_cosines,
        train_toy_embedder,
    )
    from .codec import QuantMode

    run = RunDir(cfg, "eval-face")
    codec, _ = ckpt.load_codec(args.codec)
    trigger, _ = ckpt.load_trigger(args.trigger)
    faces = _aux_for(cfg, _select_objective(cfg, "face_deid"))
    embedder = train_toy_embedder(faces.images, faces.identities, seed=cfg.seed)
    n_ids = int(faces.identities.max()) + 1
    idx_a = list(range(0, len(faces) - n_ids, 1))[: 64]
    idx_b = [i + n_ids for i in idx_a]  # same identity, next variant

    def compress(batch):
        with torch.no_grad():
            return codec(batch, QuantMode.EVAL_ROUND).x_hat.clamp(0, 1)

    clean_a = compress(faces.images[idx_a])
    clean_b = compress(faces.images[idx_b])
    clean_cos = pair_cosines(embedder, clean_a, clean_b)
    threshold = calibrate_match_threshold(clean_cos)
    with torch.no_grad():
        pois = trigger.inject(faces.images[idx_a], clip=True).x_p
    attacked = compress(pois)
    attacked_cos = pair_cosines(embedder, compress(faces.images[idx_a]), attacked)
    clean_acc = face_match_accuracy(clean_cos, threshold)
    attacked_acc = face_match_accuracy(attacked_cos, threshold)
    run.finish(threshold=threshold, clean_accuracy=clean_acc,
               attacked_accuracy=attacked_acc)
    print(f"threshold {threshold:.3f}  clean accuracy {clean_acc:.2%}  "
          f"attacked accuracy {attacked_acc:.2%}")
    return 0


def cmd_defend_sweep(cfg: ExperimentConfig, args) -> int:
    run = RunDir(cfg, "defend-sweep")
    codec, _ = ckpt.load_codec(args.codec)
    trigger, _ = ckpt.load_trigger(args.trigger)
    corpus = _resolve_dataset(cfg.main_dataset, cfg.seed)
    holdout = corpus.images[-min(16, len(corpus)) :]
    grid = DefenseGrid(
        blur_sigmas=cfg.defense.blur_sigmas,
        squeeze_depths=cfg.defense.squeeze_depths,
        amplify_factor=cfg.defense.amplify_factor,
    )
    report = defense_sweep(codec, trigger, holdout, grid)
    out = run.path / "defense_sweep.csv"
    report.to_csv(out)
    for (kind, param, variant), agg in sorted(report.aggregates.items()):
        if variant == "attacked":
            print(f"{kind:8s} {param:5.2f}  attacked psnr {agg['psnr']:6.2f} dB")
    run.finish(table=str(out))
    return 0


def cmd_report(cfg: ExperimentConfig, args) -> int:
    run_path = Path(args.run)
    manifest_path = run_path / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest in {run_path}")
    manifest = json.loads(manifest_path.read_text())
    print(json.dumps(manifest, indent=2, sort_keys=True))
    metrics = run_path / "metrics.jsonl"
    if metrics.exists():
        lines = metrics.read_text().splitlines()
        print(f"metrics: {len(lines)} records")
        if lines:
            print("last:", lines[-1])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqdoor",
        description="Backdoor attacks on learned image compression with "
                    "adaptive frequency-domain triggers (desk scale).")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        return p

    with_config(sub.add_parser("train-vanilla", help="rate-distortion training"))
    p = with_config(sub.add_parser("attack", help="single-objective backdoor finetuning"))
    p.add_argument("--objective", required=True,
                   choices=["bpp", "psnr", "seg_targeted", "face_deid"])
    p.add_argument("--codec", required=True, help="vanilla codec checkpoint")
    p = with_config(sub.add_parser("attack-multi", help="multi-trigger finetuning"))
    p.add_argument("--codec", required=True)
    p = with_config(sub.add_parser("inject", help="write poisoned images to disk"))
    p.add_argument("--trigger", required=True)
    p.add_argument("--images", help="input image directory (default: config dataset)")
    p.add_argument("--out", help="output directory")
    p = with_config(sub.add_parser("eval-rd", help="rate-distortion table"))
    p.add_argument("--codec", nargs="+", required=True)
    p.add_argument("--trigger", nargs="+")
    p.add_argument("--poisoned", action="store_true")
    p.add_argument("--images")
    p = with_config(sub.add_parser("eval-asr", help="segmentation attack success rate"))
    p.add_argument("--codec", required=True)
    p.add_argument("--trigger", required=True)
    p = with_config(sub.add_parser("eval-face", help="face de-identification accuracy"))
    p.add_argument("--codec", required=True)
    p.add_argument("--trigger", required=True)
    p = with_config(sub.add_parser("defend-sweep", help="pre-processing defense sweep"))
    p.add_argument("--codec", required=True)
    p.add_argument("--trigger", required=True)
    p = sub.add_parser("report", help="print a run's manifest and metrics")
    p.add_argument("--run", required=True)
    return parser


_COMMANDS = {
    "train-vanilla": cmd_train_vanilla,
    "attack": cmd_attack,
    "attack-multi": cmd_attack_multi,
    "inject": cmd_inject,
    "eval-rd": cmd_eval_rd,
    "eval-asr": cmd_eval_asr,
    "eval-face": cmd_eval_face,
    "defend-sweep": cmd_defend_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            cfg = ExperimentConfig()
        else:
            cfg = load_config(args.config)
        torch.manual_seed(cfg.seed)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FreqdoorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
