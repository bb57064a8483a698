"""Acceptance checks. Each criterion prints one PASS/FAIL line at the end of the module."""
import json
import math
import time

import numpy as np
import pytest
import torch

from oracles import (brute_class_iou, brute_confusion, brute_foreground_iou, central_difference, naive_context,
                     naive_regions, relative_error)
from personaseg.context import (GroupContextParams, aggregate_group_context, attention_weights, enhance,
                                extract_regions)
from personaseg.data import IGNORE, SynthSpec, generate_synthetic
from personaseg.grouping import Descriptor, GroupBatchStream, kmeans, make_group_batches, cluster_samples
from personaseg.losses import adversarial_loss, entropy_from_logits, entropy_map, pseudo_loss, seg_loss
from personaseg.metrics import (ConfusionAccumulator, EvalReport, class_iou, evaluate, make_report, mean_iou,
                               render_table)
from personaseg.networks import ModelConfig, build_discriminator, build_model
from personaseg.training import (MetricsLog, desk_train_config, evaluate_model, mask_uncertain_pixels,
                                 rank_and_select, select_pseudo_labels, train_step1, train_step2)

RESULTS = []


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    if tr is None:
        return
    tr.write_line("")
    tr.write_line("acceptance summary")
    for name, ok, detail in RESULTS:
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def record(name, ok, detail):
    RESULTS.append((name, bool(ok), detail))
    assert ok, f"{name}: {detail}"


def _params(ch, seed, dtype=torch.float64):
    torch.manual_seed(seed)
    p = GroupContextParams(ch).to(dtype)
    with torch.no_grad():
        p.fuse.weight.normal_(0, 0.5)
        p.fuse.bias.normal_(0, 0.5)
    return p


def test_context_math_oracle():
    t0 = time.time()
    worst = 0.0
    for seed in range(50):
        g = torch.Generator().manual_seed(seed)
        n, c, ch, h, w = 3, 5, 8, 4, 4
        x = torch.randn(n, ch, h, w, generator=g, dtype=torch.float64)
        aux = torch.randn(n, c, h, w, generator=g, dtype=torch.float64) * 2
        params = _params(ch, seed)
        bank = extract_regions(x, aux)
        for j in range(n):
            worst = max(worst, float(np.abs(bank[j].numpy() - naive_regions(x[j], aux[j])).max()))
        with torch.no_grad():
            ctx = aggregate_group_context(x, bank, params)
        for j in range(n):
            worst = max(worst, float(np.abs(ctx[j].numpy() - naive_context(x[j], bank, params)).max()))
    dt = time.time() - t0
    record("context-math oracle", worst < 1e-5 and dt < 30, f"max abs diff {worst:.2e}, {dt:.1f}s")


def _pipeline_loss(x, aux, params, weight):
    bank = extract_regions(x, aux)
    return (enhance(x, aggregate_group_context(x, bank, params), params) * weight).sum()


def test_gradient_suite():
    t0 = time.time()
    errors = []
    for seed in range(20):
        g = torch.Generator().manual_seed(100 + seed)
        x = torch.randn(2, 4, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
        aux = torch.randn(2, 3, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
        params = _params(4, seed)
        weight = torch.randn(2, 4, 3, 3, generator=g, dtype=torch.float64)
        tensors = [x, aux] + list(params.parameters())
        analytic = torch.autograd.grad(_pipeline_loss(x, aux, params, weight), tensors)
        with torch.no_grad():
            numeric = central_difference(lambda: _pipeline_loss(x, aux, params, weight), tensors)
        errors.append(relative_error(analytic, numeric))

        logits = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
        target = torch.randint(0, 3, (2, 4, 4), generator=g)
        target[0, 0, 0] = IGNORE
        conv = torch.nn.Conv2d(1, 1, 3, padding=1).double()
        with torch.no_grad():
            conv.weight.normal_(0, 1, generator=g)

        def disc(e, conv=conv):
            return conv(e[:, None])

        for fn in (lambda: seg_loss(logits, target), lambda: pseudo_loss(logits, target),
                   lambda: adversarial_loss(disc, entropy_from_logits(logits))):
            analytic = torch.autograd.grad(fn(), [logits])
            with torch.no_grad():
                numeric = central_difference(fn, [logits])
            errors.append(relative_error(analytic, numeric))
    dt = time.time() - t0
    worst = max(errors)
    record("gradient suite", worst < 1e-3 and len(errors) >= 20 and dt < 120,
           f"{len(errors)} instances, max rel err {worst:.2e}, {dt:.1f}s")


def test_normalization_invariants():
    worst_row = 0.0
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(2, 8, 4, 4, generator=g)
        bank = torch.randn(3, 5, 8, generator=g) * 5
        with torch.no_grad():
            w = attention_weights(x, bank, _params(8, seed, torch.float32))
        worst_row = max(worst_row, float((w.sum(-1) - 1).abs().max()))
    ents = []
    for c in (2, 3, 7, 19):
        uniform = torch.full((1, c, 2, 2), 1.0 / c, dtype=torch.float64)
        onehot = torch.zeros(1, c, 2, 2, dtype=torch.float64)
        onehot[:, 0] = 1
        rand = torch.softmax(torch.randn(4, c, 5, 5, dtype=torch.float64) * 4, dim=1)
        e_rand = entropy_map(rand)
        ents.append(abs(float(entropy_map(uniform).max()) - math.log(c)) <= 1e-6
                    and float(entropy_map(onehot).abs().max()) == 0.0
                    and float(e_rand.min()) >= 0 and float(e_rand.max()) <= math.log(c) + 1e-12)
    record("normalization invariants", worst_row <= 1e-6 and all(ents),
           f"attention row-sum err {worst_row:.1e}, entropy bounds ok={all(ents)}")


def test_identity_init_equivalence():
    imgs = torch.rand(4, 3, 48, 48, generator=torch.Generator().manual_seed(0))
    none = build_model(ModelConfig(variant="none", seed=5)).eval()
    group = build_model(ModelConfig(variant="group", seed=5)).eval()
    with torch.no_grad():
        diff = float((none(imgs).logits - group(imgs).logits).abs().max())
    record("identity-init equivalence", diff <= 1e-6, f"max logit diff {diff:.1e}")


def test_metric_oracle():
    rng = np.random.default_rng(0)
    ok = True
    preds, gts = {}, {}
    acc = ConfusionAccumulator(4)
    for k in range(100):
        gt = rng.integers(0, 4, (8, 8))
        gt[rng.random((8, 8)) < 0.15] = IGNORE
        pred = rng.integers(0, 4, (8, 8))
        acc.update(pred, gt)
        preds[f"i{k:03d}"], gts[f"i{k:03d}"] = pred, gt
        single = ConfusionAccumulator(4).update(pred, gt)
        ok &= np.array_equal(single.matrix, brute_confusion(pred, gt, 4))
        ok &= class_iou(single) == brute_class_iou(pred, gt, 4)
    rep = evaluate(preds, gts, 4)
    per = [brute_foreground_iou(preds[i], gts[i]) for i in sorted(gts)]
    kept = [v for v in per if v is not None]
    total = sum(brute_confusion(preds[i], gts[i], 4) for i in gts)
    brute_ious = []
    for c in range(4):
        tp, fp, fn = total[c, c], total[:, c].sum() - total[c, c], total[c].sum() - total[c, c]
        brute_ious.append(None if tp + fp + fn == 0 else tp / (tp + fp + fn))
    ok &= rep.class_iou == brute_ious and rep.miou == mean_iou(brute_ious)
    ok &= rep.fiou == float(np.mean(kept)) and list(rep.per_image.values()) == per
    ok &= np.array_equal(acc.matrix, total)
    other = EvalReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    other.user = "user1"
    report = make_report([rep, other], class_names=["bg", "a", "b", "c"])
    ablation = render_table([("None", report["fiou"]), ("Global", report["fiou"]), ("OURS", report["fiou"])],
                            report["users"], title="FIoU")
    rendered = all(report["tables"][k] for k in ("summary", "class_iou")) and "Mean" in report["tables"]["summary"]
    rendered = rendered and len(ablation.splitlines()) == 6 and "OURS" in ablation
    record("metric oracle", ok and rendered, f"100 random 8x8 pairs exact={bool(ok)}, report renders={rendered}")


def test_pseudo_selection_contract():
    scores = {f"img{i:03d}": float(v) for i, v in enumerate(np.random.default_rng(1).random(100))}
    chosen = rank_and_select(scores, 0.5)
    ties = {f"img{i:03d}": 0.5 for i in range(100)}
    tie_ok = rank_and_select(ties, 0.5) == sorted(ties)[:50] == rank_and_select(dict(reversed(ties.items())), 0.5)
    order_ok = max(scores[i] for i in chosen) <= min(scores[i] for i in scores if i not in chosen)
    pred = torch.randint(0, 3, (8, 8), generator=torch.Generator().manual_seed(0))
    ent = torch.rand(8, 8, generator=torch.Generator().manual_seed(1))
    ends = (mask_uncertain_pixels(pred, ent, 1.0) == pred).all() and (mask_uncertain_pixels(pred, ent, 0.0) == IGNORE).all()
    record("pseudo-selection contract", len(chosen) == 50 and tie_ok and order_ok and bool(ends),
           f"selected {len(chosen)}/100, deterministic ties={tie_ok}, q endpoints ok={bool(ends)}")


def test_kmeans_and_batching():
    rng = np.random.default_rng(0)
    ok = True
    for seed in range(10):
        pts = np.concatenate([rng.normal(m, 1.0, (30, 5)) for m in (0, 4, 8)])
        descs = [Descriptor(f"d{i:03d}", v) for i, v in enumerate(pts)]
        a = kmeans(descs, 3, seed=seed)
        b = kmeans(descs, 3, seed=seed)
        ok &= all(y <= x + 1e-9 for x, y in zip(a.history, a.history[1:]))
        ok &= sorted(a.mapping) == sorted(d.id for d in descs) and set(a.mapping.values()) == {0, 1, 2}
        ok &= a.mapping == b.mapping and a.history == b.history
        batches = make_group_batches(a, 4, seed=seed)
        flat = [i for bt in batches for i in bt]
        ok &= sorted(flat) == sorted(a.mapping) and len(flat) == len(set(flat))
        ok &= all(len({a.mapping[i] for i in bt}) == 1 for bt in batches)
        ok &= batches == make_group_batches(a, 4, seed=seed)
        stream = GroupBatchStream(a, 4, seed)
        ok &= all(len({a.mapping[i] for i in next(stream)}) == 1 for _ in range(60))
    record("k-means/batching", ok, "objective non-increasing, exact partition, single-group batches, deterministic")


# desk-scale fixture: 600 personal images, 4 true groups, 64x64
FIXTURE = SynthSpec(seed=0, n_personal=600, n_groups=4, image_size=64, texture_amplitude=0.03,
                    brightness=0.15, noise=0.05, source_family_size=8)
SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="module")
def desk_runs():
    torch.set_num_threads(1)
    t0 = time.time()
    data = generate_synthetic(FIXTURE)
    train_ids, val_ids = set(data.split["train"]), set(data.split["val"])
    train = [s for s in data.personal if s.id in train_ids]
    val = [s for s in data.personal if s.id in val_ids]
    gts = {k: v for k, v in data.ground_truth.items() if k in val_ids}
    groups = cluster_samples(data.personal, FIXTURE.n_groups, seed=0)
    out = {}
    for seed in SEEDS:
        row = {}
        for name, variant, lam in (("src", "none", 0.0), ("adv", "none", None), ("group", "group", None)):
            cfg = desk_train_config(seed=seed, source_bank="grouped")
            if lam is not None:
                cfg.lambda_adv = lam
            mc = ModelConfig(num_classes=FIXTURE.n_classes, variant=variant, seed=seed)
            model, disc = build_model(mc), build_discriminator(mc)
            train_step1(model, disc, data.source, train, groups, cfg, model_config=mc)
            row[name] = evaluate_model(model, val, gts, groups, FIXTURE.n_classes).fiou
            if name == "group":
                ps = select_pseudo_labels(model, train, groups, cfg.select_rate, cfg.pixel_quantile)
                train_step2(model, disc, data.source, ps, train, groups, cfg, model_config=mc)
                row["step2"] = evaluate_model(model, val, gts, groups, FIXTURE.n_classes).fiou
        out[seed] = row
        print(f"seed {seed}: " + " ".join(f"{k}={v:.4f}" for k, v in row.items()))
    return out, time.time() - t0


def _fmt_runs(runs, a, b):
    return ", ".join(f"{runs[s][a]:.3f}/{runs[s][b]:.3f}" for s in SEEDS)


@pytest.mark.slow
def test_desk_ablation_direction(desk_runs):
    runs, elapsed = desk_runs
    wins = sum(runs[s]["group"] > runs[s]["adv"] for s in SEEDS)
    s2 = sum(runs[s]["step2"] >= runs[s]["group"] for s in SEEDS)
    detail = (f"group>none {wins}/5 [{_fmt_runs(runs, 'group', 'adv')}], step2>=step1 {s2}/5 "
              f"[{_fmt_runs(runs, 'step2', 'group')}], {elapsed / 60:.1f} min")
    record("desk ablation direction", wins >= 4 and s2 >= 4 and elapsed < 1800, detail)


@pytest.mark.slow
def test_adaptation_direction(desk_runs):
    runs, _ = desk_runs
    wins = sum(runs[s]["adv"] > runs[s]["src"] for s in SEEDS)
    record("adaptation direction", wins >= 4, f"adv>source-only {wins}/5 [{_fmt_runs(runs, 'adv', 'src')}]")


def test_determinism(tmp_path):
    data = generate_synthetic(SynthSpec(seed=3, n_source=32, n_personal=32, image_size=32, n_groups=2,
                                        brightness=0.1, noise=0.05))
    groups = cluster_samples(data.personal, 2, seed=0)
    logs = []
    for run in ("a", "b"):
        cfg = desk_train_config(seed=11, steps=10, steps_step2=6, batch_size=4, crop=32)
        mc = ModelConfig(variant="group", seed=11)
        model, disc = build_model(mc), build_discriminator(mc)
        log = MetricsLog(tmp_path / run / "metrics.jsonl")
        train_step1(model, disc, data.source, data.personal, groups, cfg, model_config=mc, metrics=log)
        ps = select_pseudo_labels(model, data.personal, groups, 0.5, 0.8)
        train_step2(model, disc, data.source, ps, data.personal, groups, cfg, model_config=mc, metrics=log)
        logs.append((tmp_path / run / "metrics.jsonl").read_bytes())
    record("determinism", logs[0] == logs[1] and len(logs[0]) > 0, f"metrics.jsonl {len(logs[0])} bytes identical")
