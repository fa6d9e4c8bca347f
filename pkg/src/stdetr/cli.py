"""Command-line entry points: data generation, training, evaluation,
inference, the full-model gradient check, and the ablation harness.

Every command is a pure function of (config, seed); artifacts are
byte-reproducible.  Configs are flat JSON, each key overridable with
``--key=value``.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
from dataclasses import dataclass, asdict, fields

import numpy as np

from . import tensor as T
from .evalkit import EvalReport, dump_attention, evaluate
from .model import Adam, DetectionSet, ModelConfig, STDETR, detections_for_eval
from .synthdata import (
    Dataset,
    DatasetSpec,
    generate_dataset,
    generate_sequence,
    read_dataset,
    write_dataset,
)

CKPT_MAGIC = b"STCK1"


class ConfigError(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    T: int = 2
    nq: int = 8
    d: int = 32
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    aggregation: str = "early"
    seq2seq: bool = False
    tpe: bool = True
    input_mode: str = "rgb_of"
    img_size: int = 64
    ffn_mult: int = 4
    # data
    num_sequences: int = 200
    eval_sequences: int = 50
    moving_min: int = 1
    moving_max: int = 3
    static_min: int = 1
    static_max: int = 3
    velocity_min: int = 1
    velocity_max: int = 3
    size_min: int = 8
    size_max: int = 16
    noise_amp: float = 0.1
    # training
    epochs: int = 12
    lr: float = 1e-4
    lr_half_every: int = 100
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            T=self.T,
            nq=self.nq,
            d=self.d,
            heads=self.heads,
            enc_layers=self.enc_layers,
            dec_layers=self.dec_layers,
            aggregation=self.aggregation,
            seq2seq=self.seq2seq,
            tpe=self.tpe,
            input_mode=self.input_mode,
            img_size=self.img_size,
            ffn_mult=self.ffn_mult,
        )

    def dataset_spec(self, split: str = "train") -> DatasetSpec:
        # disjoint deterministic seeds per split
        return DatasetSpec(
            num_sequences=self.num_sequences if split == "train" else self.eval_sequences,
            T=self.T,
            img_size=self.img_size,
            moving_range=(self.moving_min, self.moving_max),
            static_range=(self.static_min, self.static_max),
            velocity_range=(self.velocity_min, self.velocity_max),
            size_range=(self.size_min, self.size_max),
            noise_amp=self.noise_amp,
            seed=self.seed * 2 + (0 if split == "train" else 1),
        )


def load_run_config(path=None, overrides=()) -> RunConfig:
    raw = {}
    if path is not None:
        with open(path) as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a flat JSON object")
    known = {f.name: f.type for f in fields(RunConfig)}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        raw[key] = val
    cfg = RunConfig()
    for key, val in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        cur = getattr(cfg, key)
        if isinstance(cur, bool):
            if isinstance(val, str):
                val = val.lower() in ("1", "true", "yes", "on")
        elif isinstance(cur, int):
            val = int(val)
        elif isinstance(cur, float):
            val = float(val)
        else:
            val = str(val)
        setattr(cfg, key, val)
    cfg.model_config().validate()
    return cfg


# -- checkpoints -----------------------------------------------------------------
#
# magic "STCK1" | u32 manifest length | JSON manifest | f64-LE parameter blobs


def save_checkpoint(model: STDETR, path: str, step: int = 0) -> None:
    names = sorted(model.params.keys())
    manifest = json.dumps(
        {
            "config": asdict(model.config),
            "step": step,
            "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for n in names:
            f.write(model.params[n].data.astype("<f8").tobytes())


def load_checkpoint(model: STDETR, path: str) -> int:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:5] != CKPT_MAGIC:
        raise CheckpointMismatch(f"bad checkpoint magic {blob[:5]!r}")
    (mlen,) = struct.unpack("<I", blob[5:9])
    manifest = json.loads(blob[9 : 9 + mlen].decode("utf-8"))
    if manifest["config"] != asdict(model.config):
        raise CheckpointMismatch("checkpoint config does not match model config")
    off = 9 + mlen
    for entry in manifest["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in model.params or model.params[name].shape != shape:
            raise CheckpointMismatch(f"parameter {name} missing or shape mismatch")
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        model.params[name].data = arr.astype(np.float64).copy()
        off += n * 8
    return int(manifest["step"])


# -- training / evaluation ---------------------------------------------------------


def train_model(model: STDETR, dataset: Dataset, cfg: RunConfig, log_path=None):
    opt = Adam(model.params, lr=cfg.lr)
    log = open(log_path, "w") if log_path else None
    step = 0
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * 0.5 ** (epoch // cfg.lr_half_every)
        for seq in dataset.sequences:
            opt.zero_grad()
            total, terms = model.loss(seq)
            T.backward(total)
            opt.step()
            step += 1
            if log:
                rec = {"step": step, "loss": terms["total"]}
                rec.update({k: v for k, v in terms.items() if k != "total"})
                log.write(json.dumps(rec, sort_keys=True) + "\n")
    if log:
        log.close()
    return step


def evaluate_model(model: STDETR, dataset: Dataset) -> EvalReport:
    c = model.config
    detections, gts = {}, {}
    for i, seq in enumerate(dataset.sequences):
        out, _ = model.forward(seq)
        if c.seq2seq:
            for t, det in enumerate(out):
                img = f"{i:05d}_t{t}"
                detections[img] = detections_for_eval(det)
                gts[img] = [b for _, b in seq.gt_per_step[t]]
        else:
            img = f"{i:05d}"
            detections[img] = detections_for_eval(out)
            gts[img] = [b for _, b in seq.gt_per_step[c.T - 1]]
    return evaluate(detections, gts)


def run_cell(cfg: RunConfig) -> EvalReport:
    """Train from scratch and evaluate; the unit of the ablation harness."""
    model = STDETR(cfg.model_config(), seed=cfg.seed)
    train_model(model, generate_dataset(cfg.dataset_spec("train")), cfg)
    return evaluate_model(model, generate_dataset(cfg.dataset_spec("eval")))


# -- full-model gradient check ------------------------------------------------------


def model_grad_check(
    config: ModelConfig, seed: int = 0, coords_per_param: int = 3, eps: float = 1e-5
) -> float:
    """Central-difference check of d(loss)/d(param) for every parameter.

    The bipartite assignment is frozen at the base point (the loss treats
    it as a constant), then a deterministic sample of coordinates per
    parameter tensor is perturbed.  Returns the max relative error.
    """
    from .setmatch import match, set_loss

    model = STDETR(config, seed=seed)
    spec = DatasetSpec(
        num_sequences=1,
        T=config.T,
        img_size=config.img_size,
        moving_range=(1, 2),
        static_range=(1, 1),
        size_range=(6, 10),
        seed=seed,
    )
    seq = generate_sequence(spec, 0)

    def frozen_loss(assignments=None):
        out, _ = model.forward(seq)
        dets = out if config.seq2seq else [out]
        steps = range(config.T) if config.seq2seq else [config.T - 1]
        totals = []
        assigns = []
        for det, t in zip(dets, steps):
            gts = seq.gt_per_step[t]
            a = (
                match(det.class_logits, det.boxes, gts)
                if assignments is None
                else assignments[len(assigns)]
            )
            assigns.append(a)
            lt, _ = set_loss(det.class_logits, det.boxes, gts, a)
            totals.append(lt)
        total = totals[0]
        for lt in totals[1:]:
            total = T.add(total, lt)
        return total, assigns

    base_loss, assigns = frozen_loss()
    for p in model.params.values():
        p.grad = None
    T.backward(base_loss)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 12345]))
    worst = 0.0
    for name in sorted(model.params.keys()):
        p = model.params[name]
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        n_coords = min(coords_per_param, flat.size)
        idxs = rng.choice(flat.size, size=n_coords, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = frozen_loss(assigns)[0].item()
            flat[i] = orig - eps
            fm = frozen_loss(assigns)[0].item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(num), 1e-8)
            worst = max(worst, abs(aflat[i] - num) / denom)
    return worst


# -- ablation harness ----------------------------------------------------------------


def ablation_cells():
    """The experiment matrix behind the four reported trend tables."""
    base = dict(aggregation="early", tpe=True, input_mode="rgb_of", T=2)
    cells = {
        "baseline_1step": dict(base, T=1),
        "early_T2": dict(base),
        "early_T2_no_tpe": dict(base, tpe=False),
        "early_T2_rgb": dict(base, input_mode="rgb"),
        "early_T2_rgb_rgb": dict(base, input_mode="rgb_rgb"),
        "late_T2": dict(base, aggregation="late"),
        "early_T4": dict(base, T=4),
    }
    return cells


def run_ablation(cfg: RunConfig, cells=None, seeds=(0, 1, 2), progress=None) -> dict:
    """Run each cell for each seed; report median mAP/AP50/AP75 per cell."""
    if cells is None:
        cells = ablation_cells()
    results = {}
    for name, overrides in cells.items():
        metrics = []
        for seed in seeds:
            cell_cfg = RunConfig(**{**asdict(cfg), **overrides, "seed": seed})
            report = run_cell(cell_cfg)
            metrics.append((report.map_total, report.ap50, report.ap75))
            if progress:
                progress(name, seed, report)
        med = [float(np.median([m[i] for m in metrics])) for i in range(3)]
        results[name] = {
            "map_total": med[0],
            "ap50": med[1],
            "ap75": med[2],
            "per_seed": [
                {"map_total": m[0], "ap50": m[1], "ap75": m[2]} for m in metrics
            ],
        }
    return results


def ablation_markdown(results: dict) -> str:
    lines = [
        "| cell | mAP_Total | AP_50 | AP_75 |",
        "|------|-----------|-------|-------|",
    ]
    for name in results:
        r = results[name]
        lines.append(
            f"| {name} | {r['map_total']:.3f} | {r['ap50']:.3f} | {r['ap75']:.3f} |"
        )
    return "\n".join(lines) + "\n"


# -- commands --------------------------------------------------------------------------


def _error(msg: str, kind: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": msg}) + "\n")
    return code


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, args.override)
    ds = generate_dataset(cfg.dataset_spec(args.split))
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.sequences)} sequences to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.override)
    ds = read_dataset(args.dataset) if args.dataset else generate_dataset(
        cfg.dataset_spec("train")
    )
    model = STDETR(cfg.model_config(), seed=cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    step = train_model(model, ds, cfg, log_path=os.path.join(args.out, "loss_log.jsonl"))
    save_checkpoint(model, os.path.join(args.out, "model.stck"), step=step)
    with open(os.path.join(args.out, "config.json"), "w") as f:
        json.dump(asdict(cfg), f, sort_keys=True, indent=2)
    print(f"trained {step} steps, checkpoint in {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.override)
    model = STDETR(cfg.model_config(), seed=cfg.seed)
    if args.checkpoint:
        load_checkpoint(model, args.checkpoint)
    ds = read_dataset(args.dataset) if args.dataset else generate_dataset(
        cfg.dataset_spec("eval")
    )
    report = evaluate_model(model, ds)
    payload = report.to_json()
    if args.out:
        with open(args.out, "w") as f:
            f.write(payload)
    print(payload)
    return 0


def cmd_infer(args) -> int:
    cfg = load_run_config(args.config, args.override)
    model = STDETR(cfg.model_config(), seed=cfg.seed)
    if args.checkpoint:
        load_checkpoint(model, args.checkpoint)
    ds = read_dataset(args.dataset) if args.dataset else generate_dataset(
        cfg.dataset_spec("eval")
    )
    os.makedirs(args.out, exist_ok=True)
    records = []
    for i, seq in enumerate(ds.sequences):
        out, _ = model.forward(seq)
        dets = out if cfg.seq2seq else [out]
        for t, det in enumerate(dets):
            for score, box in detections_for_eval(det):
                records.append(
                    {
                        "sequence": i,
                        "step": t,
                        "score": score,
                        "box": [box.cx, box.cy, box.w, box.h],
                    }
                )
        if args.attention and model.last_cross_attention is not None:
            w = model.last_cross_attention.numpy()
            if cfg.aggregation == "early":
                grid = (cfg.img_size // 8, cfg.img_size // 8)
            else:
                grid = (cfg.T, cfg.nq)
            dump_attention(
                w, grid, os.path.join(args.out, f"attention_{i:05d}"), prefix="query"
            )
    with open(os.path.join(args.out, "detections.json"), "w") as f:
        json.dump(records, f, sort_keys=True, indent=2)
    print(f"wrote {len(records)} detections to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config, args.override)
    worst = 0.0
    for aggregation in ("early", "late"):
        mc = ModelConfig(
            T=cfg.T,
            nq=cfg.nq,
            d=cfg.d,
            heads=cfg.heads,
            enc_layers=cfg.enc_layers,
            dec_layers=cfg.dec_layers,
            aggregation=aggregation,
            tpe=cfg.tpe,
            input_mode=cfg.input_mode,
            img_size=cfg.img_size,
            ffn_mult=cfg.ffn_mult,
        )
        err = model_grad_check(mc, seed=cfg.seed)
        print(f"gradcheck {aggregation}: max rel error {err:.3e}")
        worst = max(worst, err)
    if worst >= 1e-4:
        return _error(f"gradient check failed: {worst:.3e}", "GradCheckFailed", 1)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.override)
    cells = ablation_cells()
    if args.cells:
        wanted = args.cells.split(",")
        unknown = [c for c in wanted if c not in cells]
        if unknown:
            return _error(f"unknown cells {unknown}", "ConfigError", 1)
        cells = {k: cells[k] for k in wanted}
    seeds = tuple(int(s) for s in args.seeds.split(","))

    def progress(name, seed, report):
        print(f"[ablate] {name} seed={seed} ap50={report.ap50:.3f}", flush=True)

    results = run_ablation(cfg, cells, seeds=seeds, progress=progress)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablation.json"), "w") as f:
        json.dump(results, f, sort_keys=True, indent=2)
    md = ablation_markdown(results)
    with open(os.path.join(args.out, "ablation.md"), "w") as f:
        f.write(md)
    print(md)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stdetr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="flat JSON config file")
        sp.add_argument(
            "--override",
            "-o",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key",
        )

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    common(sp)
    sp.add_argument("--split", choices=["train", "eval"], default="train")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--dataset", default=None, help="STDS1 dataset file")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--out", default=None, help="report JSON path")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("infer", help="dump detections (and attention maps)")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--attention", action="store_true")
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("gradcheck", help="full-model finite-difference check")
    common(sp)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="run the trend-ablation matrix")
    common(sp)
    sp.add_argument("--cells", default=None, help="comma-separated cell names")
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_ablate)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointMismatch, FileNotFoundError, ValueError) as e:
        return _error(str(e), type(e).__name__, 1)
    except Exception as e:  # internal failure
        return _error(str(e), type(e).__name__, 2)


if __name__ == "__main__":
    sys.exit(main())
