"""Command line: synth-data, cluster, train-step1, select-pseudo, train-step2, eval, ablate.

Every command works inside one run directory (``--out``).  The resolved
RunConfig is written to ``<out>/config.json`` before anything else happens,
and later commands on the same directory start from that copy.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import List, Optional

import torch

from . import grouping
from .data import (DatasetError, DatasetSpec, SynthSpec, generate_synthetic, load_dataset, load_ground_truth,
                   merge_datasets, sample_dataset, worker_count, write_synthetic)
from .grouping import GroupAssignment
from .metrics import EvalReport, make_report, render_table, write_report
from .networks import ModelConfig, build_discriminator, build_model, load_checkpoint
from .training import (MetricsLog, NonFiniteLoss, PseudoLabelSet, TrainConfig, desk_train_config,
                       evaluate_model, select_pseudo_labels, train_step1, train_step2)

log = logging.getLogger("personaseg")

SETTINGS = ("personal", "mixall", "mixsample")
VARIANT_LABELS = {"none": "None", "global": "Global", "group": "OURS"}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    source: Optional[str] = None  # labeled source root
    personal: List[str] = field(default_factory=list)  # one root per user
    setting: str = "personal"  # personal | mixall | mixsample
    groups: int = 4
    descriptor: str = "pixel"  # pixel | resnet50
    descriptor_weights: Optional[str] = None
    eval_split: str = "val"  # val | all
    fiou_mode: str = "binary"
    synth: dict = field(default_factory=lambda: SynthSpec().to_dict())
    model: dict = field(default_factory=lambda: ModelConfig().to_dict())
    train: dict = field(default_factory=lambda: desk_train_config().to_dict())
    ablate: dict = field(default_factory=dict)  # variants / groups / settings / seeds / step2

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise UsageError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.groups < 1:
            raise UsageError("--groups must be >= 1")
        if self.eval_split not in ("val", "all"):
            raise UsageError("eval_split must be 'val' or 'all'")
        if self.descriptor not in ("pixel", "resnet50"):
            raise UsageError(f"unknown descriptor {self.descriptor!r}")

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        d = json.loads(path.read_text())
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    # every stochastic component takes the run seed
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "seed": self.seed, "groups": self.groups})

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "seed": self.seed, "num_classes": num_classes})

    def synth_spec(self) -> SynthSpec:
        return SynthSpec.from_dict({**self.synth, "seed": self.seed})


# --------------------------------------------------------------------------
# config resolution

def _resolve(args, run_dir: Path) -> RunConfig:
    existing = run_dir / "config.json"
    if args.config:
        cfg = RunConfig.load(args.config)
    elif existing.exists():
        cfg = RunConfig.load(existing)
    else:
        cfg = RunConfig(name=run_dir.name)
    d = asdict(cfg)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.variant is not None:
        d["model"] = {**d["model"], "variant": args.variant}
    if args.groups is not None:
        d["groups"] = args.groups
    if args.select_rate is not None:
        d["train"] = {**d["train"], "select_rate": args.select_rate}
    if getattr(args, "source", None):
        d["source"] = str(Path(args.source).resolve())
    if getattr(args, "personal", None):
        d["personal"] = [str(Path(p).resolve()) for p in args.personal]
    if getattr(args, "setting", None):
        d["setting"] = args.setting
    cfg = RunConfig(**d)
    cfg.train_config()  # validate before writing
    run_dir.mkdir(parents=True, exist_ok=True)
    existing.write_text(cfg.dumps())
    return cfg


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path} (run `{hint}` first)")
    return path


# --------------------------------------------------------------------------
# data plumbing

class _Data:
    """Source set, per-user personal sets and the derived training / evaluation splits.

    With several users every personal id is namespaced ``<user>_<id>`` exactly as
    ``merge_datasets`` does, so ids are unique across users.
    """

    def __init__(self, cfg: RunConfig):
        if not cfg.source:
            raise UsageError("no source dataset configured (--source or config 'source')")
        if not cfg.personal:
            raise UsageError("no personal dataset configured (--personal or config 'personal')")
        self.cfg = cfg
        self.source_spec = DatasetSpec.from_root(cfg.source)
        self.source = load_dataset(self.source_spec)
        self.num_classes = self.source_spec.class_count
        specs, raw = [], []
        for root in cfg.personal:
            spec = DatasetSpec.from_root(root)
            if spec.class_count != self.num_classes:
                raise DatasetError(f"{root}: class_count {spec.class_count} differs from the source set")
            specs.append(spec)
            raw.append(load_dataset(spec))
        self.multi = len(specs) > 1
        self.users = []  # (user, spec, samples with final ids, raw id -> final id)
        for spec, samples in zip(specs, raw):
            final = merge_datasets([samples]) if self.multi else list(samples)
            self.users.append((samples[0].user if samples else spec.user, spec, final,
                               {r.id: f.id for r, f in zip(samples, final)}))

    def all_personal(self) -> list:
        return [s for u in self.users for s in u[2]]

    def _split(self, spec, part: str):
        if self.cfg.eval_split == "val" and spec.split and spec.split.get(part):
            return spec.split[part]
        return None

    def training_personal(self) -> list:
        """Training images for the configured setting (train split only when a split exists)."""
        setting = self.cfg.setting
        if setting == "personal" and self.multi:
            raise UsageError(f"setting 'personal' needs exactly one personal root, got {len(self.users)}")
        pool = []
        for _, spec, samples, ids in self.users:
            train = self._split(spec, "train")
            allowed = {ids[i] for i in train} if train is not None else {s.id for s in samples}
            pool += [s for s in samples if s.id in allowed]
        if setting == "mixsample":
            pool = sample_dataset(pool, Fraction(1, len(self.users)), seed=self.cfg.seed)
        return pool

    def evaluation(self):
        """[(user, samples, gts)] on each user's held-out split (or every image)."""
        out = []
        for user, spec, samples, ids in self.users:
            raw = self._split(spec, "val") or sorted(ids)
            gts = load_ground_truth(spec, raw)
            by_id = {s.id: s for s in samples}
            out.append((user, [by_id[ids[i]] for i in raw], {ids[k]: v for k, v in gts.items()}))
        return out


def _descriptor(cfg: RunConfig):
    if cfg.descriptor == "resnet50":
        return grouping.resnet50_descriptor(cfg.descriptor_weights)
    return grouping.pixel_histogram_descriptor


def _cluster(cfg: RunConfig, data: _Data) -> GroupAssignment:
    # all personal images of every user are grouped; training later uses the subset it needs
    samples = data.all_personal()
    return grouping.cluster_samples(samples, cfg.groups, seed=cfg.seed, descriptor_fn=_descriptor(cfg))


def _load_groups(run_dir: Path) -> GroupAssignment:
    return GroupAssignment.load(_require(run_dir / "groups.json", "group assignment", "personaseg cluster"))


def _reset_metrics(path: Path, drop_stage: str) -> MetricsLog:
    """Drop earlier records of ``drop_stage`` so a rerun reproduces the file exactly."""
    kept = []
    if path.exists() and drop_stage != "step1":
        for line in path.read_text().splitlines():
            rec = json.loads(line)
            if not rec["name"].startswith(drop_stage + "/"):
                kept.append(line)
    path.write_text("".join(k + "\n" for k in kept))
    return MetricsLog(path)


# --------------------------------------------------------------------------
# commands

def cmd_synth_data(args) -> int:
    out = Path(args.out)
    cfg = _resolve(args, out)
    data = generate_synthetic(cfg.synth_spec())
    src, personal = write_synthetic(data, out)
    log.info("wrote %d source and %d personal images under %s", len(data.source), len(data.personal), out)
    print(json.dumps({"source": str(src.root), "personal": [str(p.root) for p in personal]}))
    return 0


def cmd_cluster(args) -> int:
    run_dir = Path(args.out)
    cfg = _resolve(args, run_dir)
    data = _Data(cfg)
    groups = _cluster(cfg, data)
    groups.save(run_dir / "groups.json")
    sizes = [len(v) for v in groups.groups().values()]
    log.info("K=%d group sizes %s", groups.k, sizes)
    return 0


def _step1(cfg: RunConfig, data: _Data, groups: GroupAssignment, run_dir: Path, metrics: MetricsLog):
    mc = cfg.model_config(data.num_classes)
    model, disc = build_model(mc), build_discriminator(mc)
    tc = cfg.train_config()
    val = None
    if tc.val_every:
        user, samples, gts = data.evaluation()[0]
        val = (samples, gts)
    return train_step1(model, disc, data.source, data.training_personal(), groups, tc, metrics=metrics,
                       run_dir=run_dir, model_config=mc, val=val)


def cmd_train_step1(args) -> int:
    run_dir = Path(args.out)
    cfg = _resolve(args, run_dir)
    data = _Data(cfg)
    groups = _load_groups(run_dir)
    res = _step1(cfg, data, groups, run_dir, _reset_metrics(run_dir / "metrics.jsonl", "step1"))
    log.info("step 1 done: %s", res.checkpoint)
    return 0


def _load_stage(run_dir: Path, stage: str, hint: str):
    model, disc, payload = load_checkpoint(_require(run_dir / f"ckpt_{stage}.pt", f"{stage} checkpoint", hint))
    return model, disc, payload


def cmd_select_pseudo(args) -> int:
    run_dir = Path(args.out)
    cfg = _resolve(args, run_dir)
    data = _Data(cfg)
    groups = _load_groups(run_dir)
    model, _, _ = _load_stage(run_dir, "step1", "personaseg train-step1")
    tc = cfg.train_config()
    ps = select_pseudo_labels(model, data.training_personal(), groups, tc.select_rate, tc.pixel_quantile,
                              tc.batch_size)
    ps.save(run_dir / "pseudo")
    log.info("selected %d of %d images", len(ps.masks), len(ps.scores))
    return 0


def cmd_train_step2(args) -> int:
    run_dir = Path(args.out)
    cfg = _resolve(args, run_dir)
    data = _Data(cfg)
    groups = _load_groups(run_dir)
    model, disc, payload = _load_stage(run_dir, "step1", "personaseg train-step1")
    _require(run_dir / "pseudo" / "index.json", "pseudo labels", "personaseg select-pseudo")
    pseudo = PseudoLabelSet.load(run_dir / "pseudo")
    mc = ModelConfig.from_dict(payload["model_config"])
    res = train_step2(model, disc, data.source, pseudo, data.training_personal(), groups, cfg.train_config(),
                      metrics=_reset_metrics(run_dir / "metrics.jsonl", "step2"), run_dir=run_dir,
                      model_config=mc, start_step=payload["step"])
    log.info("step 2 done: %s", res.checkpoint)
    return 0


def _evaluate(cfg: RunConfig, data: _Data, model, groups: GroupAssignment, tag: str) -> dict:
    reports = []
    for user, samples, gts in data.evaluation():
        reports.append(evaluate_model(model, samples, gts, groups, data.num_classes,
                                      cfg.train_config().batch_size, user=user, tag=tag,
                                      fiou_mode=cfg.fiou_mode))
    report = make_report(reports)
    report["tag"] = tag
    return report


def cmd_eval(args) -> int:
    run_dir = Path(args.out)
    cfg = _resolve(args, run_dir)
    data = _Data(cfg)
    groups = _load_groups(run_dir)
    stage = args.checkpoint
    model, _, _ = _load_stage(run_dir, stage, f"personaseg train-{stage}")
    report = _evaluate(cfg, data, model, groups, stage)
    write_report(report, run_dir, f"report_{stage}")
    write_report(report, run_dir, "report")
    print(report["tables"]["summary"])
    return 0


# --------------------------------------------------------------------------
# ablation

def _matrix(cfg: RunConfig) -> dict:
    m = dict(cfg.ablate)
    variants = m.get("variants", [cfg.model.get("variant", "group")])
    groups = m.get("groups", [cfg.groups])
    settings = m.get("settings", [cfg.setting])
    seeds = m.get("seeds", [cfg.seed])
    for name, axis in (("variants", variants), ("groups", groups), ("settings", settings), ("seeds", seeds)):
        if not axis:
            raise UsageError(f"empty ablation matrix: axis {name!r} has no values")
    for v in variants:
        if v not in VARIANT_LABELS:
            raise UsageError(f"unknown variant {v!r} in ablation matrix")
    for s in settings:
        if s not in SETTINGS:
            raise UsageError(f"unknown setting {s!r} in ablation matrix")
    return {"variants": variants, "groups": groups, "settings": settings, "seeds": seeds,
            "step2": bool(m.get("step2", False))}


def _ablation_data(cfg: RunConfig, out: Path) -> RunConfig:
    if cfg.source and cfg.personal:
        return cfg
    data_dir = out / "data"
    if not (data_dir / "source" / "dataset.json").exists():
        src, personal = write_synthetic(generate_synthetic(cfg.synth_spec()), data_dir)
    else:
        personal = [DatasetSpec.from_root(p) for p in sorted(data_dir.glob("personal*"))]
    d = asdict(cfg)
    d["source"] = str(data_dir / "source")
    d["personal"] = [str(p.root) for p in personal]
    return RunConfig(**d)


def _row_label(variant, k, setting, matrix) -> str:
    parts = [VARIANT_LABELS[variant]]
    if len(matrix["groups"]) > 1:
        parts.append(f"K={k}")
    if len(matrix["settings"]) > 1:
        parts.append({"personal": "Personal", "mixall": "MixAll", "mixsample": "MixSample"}[setting])
    return " ".join(parts)


def _train_and_evaluate(run_cfg: RunConfig, run_dir: Path, step2: bool) -> dict:
    """One ablation cell for one model: cluster, step 1 (+ step 2), per-user reports by stage."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(run_cfg.dumps())
    data = _Data(run_cfg)
    groups = _cluster(run_cfg, data)
    groups.save(run_dir / "groups.json")
    res = _step1(run_cfg, data, groups, run_dir, _reset_metrics(run_dir / "metrics.jsonl", "step1"))
    out = {"step1": _evaluate(run_cfg, data, res.model, groups, "step1")}
    write_report(out["step1"], run_dir, "report_step1")
    if step2:
        tc = run_cfg.train_config()
        ps = select_pseudo_labels(res.model, data.training_personal(), groups, tc.select_rate,
                                  tc.pixel_quantile, tc.batch_size)
        ps.save(run_dir / "pseudo")
        res2 = train_step2(res.model, res.disc, data.source, ps, data.training_personal(), groups, tc,
                           metrics=MetricsLog(run_dir / "metrics.jsonl"), run_dir=run_dir,
                           model_config=run_cfg.model_config(data.num_classes), start_step=res.step)
        out["step2"] = _evaluate(run_cfg, data, res2.model, groups, "step2")
        write_report(out["step2"], run_dir, "report_step2")
    return out


def _cell(cfg: RunConfig, setting: str, k: int, variant: str, seed: int, run_dir: Path, step2: bool) -> dict:
    """Mean-over-users (FIoU, MIoU) per stage. 'personal' trains one model per user."""
    d = asdict(cfg)
    d.update(seed=seed, groups=k, setting=setting)
    d["model"] = {**d["model"], "variant": variant}
    if setting == "personal" and len(cfg.personal) > 1:
        per_user = []
        for i, root in enumerate(cfg.personal):
            sub = RunConfig(**{**d, "personal": [root]})
            per_user.append(_train_and_evaluate(sub, run_dir / f"user{i}", step2))
        out = {}
        for stage in per_user[0]:
            merged = make_report([EvalReport.from_dict(r) for p in per_user for r in p[stage]["reports"]])
            write_report(merged, run_dir, f"report_{stage}")
            out[stage] = merged
    else:
        out = _train_and_evaluate(RunConfig(**d), run_dir, step2)
    return {stage: (rep["mean_fiou"], rep["mean_miou"]) for stage, rep in out.items()}


def cmd_ablate(args) -> int:
    out = Path(args.out)
    base = RunConfig.load(args.config) if args.config else RunConfig(name=out.name)
    d = asdict(base)
    if args.seed is not None:
        d["seed"] = args.seed
        d["ablate"] = {**d["ablate"], "seeds": [args.seed]}
    if args.variant is not None:
        d["ablate"] = {**d["ablate"], "variants": [args.variant]}
    if args.groups is not None:
        d["ablate"] = {**d["ablate"], "groups": [args.groups]}
    base = RunConfig(**d)
    matrix = _matrix(base)
    saved = out / "config.json"
    if saved.exists() and saved.read_text() != base.dumps():
        raise UsageError(f"conflicting output directory {out}: it holds a different config.json")
    out.mkdir(parents=True, exist_ok=True)
    saved.write_text(base.dumps())
    cfg = _ablation_data(base, out)

    stages = ["step1", "step2"] if matrix["step2"] else ["step1"]
    rows = {"fiou": [], "miou": []}
    for setting in matrix["settings"]:
        for k in matrix["groups"]:
            for variant in matrix["variants"]:
                label = _row_label(variant, k, setting, matrix)
                cells = {}
                for seed in matrix["seeds"]:
                    run_dir = out / "runs" / f"{setting}_K{k}_{variant}_s{seed}"
                    cells[str(seed)] = _cell(cfg, setting, k, variant, seed, run_dir, matrix["step2"])
                    log.info("%s seed %d: %s", label, seed, cells[str(seed)])
                for stage in stages:
                    name = label if len(stages) == 1 else f"{label}-S{stage[-1]}"
                    rows["fiou"].append((name, {s: c[stage][0] for s, c in cells.items()}))
                    rows["miou"].append((name, {s: c[stage][1] for s, c in cells.items()}))

    seeds = [str(s) for s in matrix["seeds"]]
    tables = {m: render_table(r, seeds, title=f"{m.upper()} per seed", label="Method") for m, r in rows.items()}
    summary = {"matrix": matrix, "tables": tables,
               "rows": {m: [{"label": l, "values": v} for l, v in r] for m, r in rows.items()}}
    (out / "ablation.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    (out / "ablation.txt").write_text("\n\n".join(tables.values()) + "\n")
    print("\n\n".join(tables.values()))
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="RunConfig json; defaults to <out>/config.json if present")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, required=True, help="run directory")
    common.add_argument("--variant", choices=list(VARIANT_LABELS))
    common.add_argument("--groups", type=int, help="K, number of groups")
    common.add_argument("--select-rate", type=float, dest="select_rate")
    common.add_argument("-v", "--verbose", action="store_true")

    data_args = argparse.ArgumentParser(add_help=False)
    data_args.add_argument("--source", type=Path, help="labeled source dataset root")
    data_args.add_argument("--personal", type=Path, nargs="+", help="personal dataset root(s), one per user")
    data_args.add_argument("--setting", choices=SETTINGS)

    p = argparse.ArgumentParser(prog="personaseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", parents=[common], help="generate the synthetic two-domain fixture")
    sub.add_parser("cluster", parents=[common, data_args], help="K-means groups of the personal images")
    sub.add_parser("train-step1", parents=[common, data_args], help="adversarial adaptation")
    sub.add_parser("select-pseudo", parents=[common, data_args], help="entropy-ranked pseudo labels")
    sub.add_parser("train-step2", parents=[common, data_args], help="refinement with pseudo labels")
    ev = sub.add_parser("eval", parents=[common, data_args], help="FIoU / MIoU report")
    ev.add_argument("--checkpoint", choices=["step1", "step2"], default="step2")
    sub.add_parser("ablate", parents=[common], help="variant x K x setting comparison")
    return p


COMMANDS = {
    "synth-data": cmd_synth_data,
    "cluster": cmd_cluster,
    "train-step1": cmd_train_step1,
    "select-pseudo": cmd_select_pseudo,
    "train-step2": cmd_train_step2,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if os.environ.get("PERSONASEG_THREADS"):
        torch.set_num_threads(worker_count())
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.error(str(e))
    except (FileNotFoundError, DatasetError, ValueError, NonFiniteLoss) as e:
        print(f"personaseg {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
