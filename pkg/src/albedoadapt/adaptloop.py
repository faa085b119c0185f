"""Phase-1 orchestration: initialization, the update loop, and evaluation.

Run directory layout::

    run/<name>/config.json
    run/<name>/ledger.json
    run/<name>/labels.jsonl
    run/<name>/iter_<i>/{model.ckpt, classifier.ckpt, pnsets.jsonl,
                         pool_scores.jsonl, metrics.json,
                         classifier_eval.json, train_batches.jsonl,
                         albedos/<cid>.png, eval_albedos/<cid>.png}

iter_0 holds the synthetic-trained base model and initial classifier; every
later model fine-tune restarts from that base checkpoint while classifiers
chain from their predecessor. The ledger records hashes, set sizes, and
metrics per iteration and is the resume source of truth: a rerun with the
same config continues after the last completed iteration.

Eval-set sampling noise is keyed by (seed, purpose, condition index) and
never varies across iterations, so metric differences between models are
purely model-driven. Pool sampling is re-keyed per iteration on purpose:
the classifier filters each fresh batch of candidates, which is what lets
the kept positive set improve from round to round. Both choices are pure
functions of config, so resumed runs reproduce uninterrupted ones.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .classifier import (
    classifier_accuracy,
    finetune_classifier,
    score_batch,
    train_initial,
)
from .core import (
    ConfigError,
    LabeledAlbedo,
    PipelineError,
    PNSets,
    RunConfig,
    ScenePair,
    derive_seed,
    quantize,
    rng_for,
)
from .dataio import (
    LabelStore,
    load_albedo,
    read_jsonl,
    save_albedo,
    write_jsonl,
)
from .diffusion import NoiseSchedule, finetune, fresh_denoiser, sample_albedo
from .metrics import labels_from_scores, mse, negative_class_ratio, psnr, ssim
from .pseudolabel import oracle_annotate, partition, rectify_sets
from .torchutil import Checkpoint

log = logging.getLogger(__name__)


@dataclass
class RunContext:
    """Everything a run needs in memory: config, datasets, directories."""

    cfg: RunConfig
    run_dir: str
    synthetic: list
    pool: list
    eval_set: list
    pool_name: str = "pool"

    def __post_init__(self) -> None:
        ids = [p.sample_id for p in self.pool]
        if len(ids) != len(set(ids)):
            raise PipelineError("duplicate sample ids in pool")

    @property
    def pool_rgb(self) -> dict:
        return {p.sample_id: p.rgb for p in self.pool}


@dataclass
class LoopState:
    iteration: int
    model: Checkpoint
    classifier: Checkpoint
    pnsets: PNSets
    pool_albedos: dict = field(default_factory=dict)


def iter_dir(run_dir: str, i: int) -> str:
    return os.path.join(run_dir, f"iter_{i}")


def model_arch(cfg: RunConfig) -> dict:
    return {"type": "cond_unet", "base_channels": cfg.base_channels}


def make_schedule(cfg: RunConfig) -> NoiseSchedule:
    return NoiseSchedule.linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)


# ---------------------------------------------------------------------------
# ledger and config persistence


def read_ledger(run_dir: str) -> dict:
    path = os.path.join(run_dir, "ledger.json")
    if not os.path.exists(path):
        return {"config_hash": None, "iterations": [], "dpo": {}}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_ledger(run_dir: str, ledger: dict) -> None:
    path = os.path.join(run_dir, "ledger.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ledger, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_config(run_dir: str, cfg: RunConfig) -> None:
    """Persist the config, refusing to reuse a run dir configured differently."""
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, "config.json")
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            existing = RunConfig.from_dict(json.load(fh))
        if existing != cfg:
            raise ConfigError(
                f"run dir {run_dir} was created with a different config; "
                "use a fresh directory or the original config"
            )
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
        fh.write("\n")


def _write_json(path: str, data: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# inference helpers


def infer_to_dir(
    model: Checkpoint, pairs: list, dirpath: str, cfg: RunConfig, seed: int
) -> dict:
    """Sample albedos for every condition, snap them to the storage grid,
    and persist; returns {condition_id: albedo}. Outputs are grid-snapped
    before any scoring so reruns that reload from disk see identical data."""
    os.makedirs(dirpath, exist_ok=True)
    conds = np.stack([p.rgb for p in pairs])
    ests = sample_albedo(
        model, conds, seed=seed, steps=cfg.sample_steps, batch_size=cfg.infer_batch
    )
    out = {}
    for pair, est in zip(pairs, ests):
        q = quantize(est, bit_depth=cfg.bit_depth)
        save_albedo(os.path.join(dirpath, f"{pair.sample_id}.png"), q)
        out[pair.sample_id] = q
    return out


def _load_albedo_dir(dirpath: str, pairs: list) -> dict:
    return {
        p.sample_id: load_albedo(os.path.join(dirpath, f"{p.sample_id}.png"))
        for p in pairs
    }


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(
    ctx: RunContext,
    model: Checkpoint,
    classifier: Checkpoint,
    eval_albedos: Optional[dict] = None,
    out_dir: Optional[str] = None,
) -> dict:
    """Hidden-truth metrics plus the classifier-judged negative ratio on the
    held-out pool; writes metrics.json when out_dir is given."""
    if not ctx.eval_set:
        raise PipelineError("empty evaluation set")
    if eval_albedos is None:
        eval_albedos = infer_to_dir(
            model,
            ctx.eval_set,
            os.path.join(out_dir or ctx.run_dir, "eval_albedos"),
            ctx.cfg,
            derive_seed(ctx.cfg.seed, "eval-sample"),
        )
    ests = [eval_albedos[p.sample_id] for p in ctx.eval_set]
    truths = [p.albedo for p in ctx.eval_set]
    mses = [mse(e, t) for e, t in zip(ests, truths)]
    psnrs = [psnr(e, t) for e, t in zip(ests, truths)]
    ssims = [ssim(e, t) for e, t in zip(ests, truths)]
    scores = score_batch(classifier, np.stack(ests), batch_size=ctx.cfg.infer_batch)
    ratio = negative_class_ratio(labels_from_scores(scores))
    report = {
        "pool": ctx.pool_name,
        "n": len(ests),
        "mse_mean": float(np.mean(mses)),
        "psnr_mean": float(np.mean(psnrs)),
        "ssim_mean": float(np.mean(ssims)),
        "negative_ratio": ratio,
        "seed": ctx.cfg.seed,
        "model_hash": model.content_hash(),
    }
    if out_dir is not None:
        _write_json(os.path.join(out_dir, "metrics.json"), report)
    return report


def classifier_eval_items(ctx: RunContext, m0_eval_albedos: dict) -> list:
    """Fixed target-domain accuracy probe: the base model's eval estimates,
    split good/bad at their median hidden-truth error. Tied to the base
    model so every iteration's classifier faces the same items, and
    balanced by construction so 0.5 is chance level."""
    errs = {
        p.sample_id: mse(m0_eval_albedos[p.sample_id], p.albedo)
        for p in ctx.eval_set
    }
    cut = float(np.median(list(errs.values())))
    return [
        (
            m0_eval_albedos[p.sample_id],
            "positive" if errs[p.sample_id] < cut else "negative",
        )
        for p in ctx.eval_set
    ]


def eval_classifier(ctx: RunContext, classifier: Checkpoint, out_dir: str) -> float:
    d0_eval = os.path.join(iter_dir(ctx.run_dir, 0), "eval_albedos")
    m0_albedos = _load_albedo_dir(d0_eval, ctx.eval_set)
    items = classifier_eval_items(ctx, m0_albedos)
    acc = classifier_accuracy(classifier, items)
    _write_json(
        os.path.join(out_dir, "classifier_eval.json"),
        {"accuracy": acc, "n_items": len(items)},
    )
    return acc


# ---------------------------------------------------------------------------
# P/N set persistence


def write_pnsets(dirpath: str, pnsets: PNSets) -> None:
    rows = []
    for setname, members in (
        ("positive", pnsets.positives),
        ("negative", pnsets.negatives),
    ):
        for m in members:
            rows.append(
                {
                    "set": setname,
                    "sample_id": m.sample_id,
                    "condition_id": m.condition_id,
                    "label": m.label,
                    "provenance": m.provenance,
                    "score": m.score,
                    "iteration": m.iteration,
                }
            )
    write_jsonl(os.path.join(dirpath, "pnsets.jsonl"), rows)


def load_pnsets(dirpath: str, iteration: int) -> PNSets:
    rows = read_jsonl(os.path.join(dirpath, "pnsets.jsonl"))
    albedo_dir = os.path.join(dirpath, "albedos")
    pos, neg = [], []
    for row in rows:
        member = LabeledAlbedo(
            sample_id=row["sample_id"],
            condition_id=row["condition_id"],
            albedo=load_albedo(os.path.join(albedo_dir, f"{row['condition_id']}.png")),
            score=row["score"],
            label=row["label"],
            provenance=row["provenance"],
            iteration=row["iteration"],
        )
        (pos if row["set"] == "positive" else neg).append(member)
    return PNSets(iteration=iteration, positives=pos, negatives=neg)


# ---------------------------------------------------------------------------
# initialization


def _initial_labels(
    ctx: RunContext, albedos: dict, store: LabelStore
) -> tuple[list, list]:
    """Seed P/N sets from the label store (manual first), topping up to the
    per-class budget with oracle annotations in a seeded random order."""
    cfg = ctx.cfg
    truth = {p.sample_id: p.albedo for p in ctx.pool}
    pos, neg = [], []

    def member(cid: str, label: str, provenance: str) -> LabeledAlbedo:
        return LabeledAlbedo(
            sample_id=cid,
            condition_id=cid,
            albedo=albedos[cid],
            score=None,
            label=label,
            provenance=provenance,
            iteration=0,
        )

    manual_ids = set()
    for cid, rec in sorted(store.effective().items()):
        if rec.provenance != "manual" or cid not in albedos:
            continue
        if rec.label == "positive" and len(pos) < cfg.manual_budget:
            pos.append(member(cid, "positive", "manual"))
            manual_ids.add(cid)
        elif rec.label == "negative" and len(neg) < cfg.manual_budget:
            neg.append(member(cid, "negative", "manual"))
            manual_ids.add(cid)

    order = rng_for(cfg.seed, "init-labels").permutation(len(ctx.pool))
    for idx in order:
        if len(pos) >= cfg.manual_budget and len(neg) >= cfg.manual_budget:
            break
        cid = ctx.pool[idx].sample_id
        if cid in manual_ids:
            continue
        label = oracle_annotate(albedos[cid], truth[cid], cfg.oracle_mse_threshold)
        if label == "positive" and len(pos) < cfg.manual_budget:
            pos.append(member(cid, "positive", "oracle"))
        elif label == "negative" and len(neg) < cfg.manual_budget:
            neg.append(member(cid, "negative", "oracle"))
        else:
            continue
        store.append(cid, label, "oracle", iteration=0)

    if not pos or not neg:
        raise PipelineError(
            f"initial labeling found {len(pos)} positives / {len(neg)} negatives; "
            "both classes are required (adjust oracle_mse_threshold or pool size)"
        )
    return pos, neg


def _write_scores(
    path: str, stage: str, rows: list, append: bool = False
) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps({"stage": stage, **row}, sort_keys=True))
            fh.write("\n")


def initialize(ctx: RunContext) -> LoopState:
    """Train the base model and initial classifier, infer the pool, and
    build P/N Set 0 from manual/oracle labels over those estimates."""
    cfg = ctx.cfg
    if not ctx.pool:
        raise PipelineError("empty pool")
    if not ctx.synthetic:
        raise PipelineError("empty synthetic dataset")
    write_config(ctx.run_dir, cfg)
    ledger = read_ledger(ctx.run_dir)
    ledger["config_hash"] = cfg.config_hash()
    if any(e["iteration"] == 0 for e in ledger["iterations"]):
        return load_state(ctx, 0)

    d0 = iter_dir(ctx.run_dir, 0)
    os.makedirs(d0, exist_ok=True)
    schedule = make_schedule(cfg)
    arch = model_arch(cfg)

    log.info("training base model on %d synthetic pairs", len(ctx.synthetic))
    rand = fresh_denoiser(arch, schedule, cfg.seed)
    pairs = [(p.albedo, p.rgb) for p in ctx.synthetic]
    ids = [p.sample_id for p in ctx.synthetic]
    base, tlog = finetune(
        rand,
        pairs,
        steps=cfg.model_pretrain_steps,
        lr=cfg.model_pretrain_lr,
        seed=cfg.seed,
        provenance="base",
        batch_size=cfg.model_batch_size,
        sample_ids=ids,
    )
    base.save(os.path.join(d0, "model.ckpt"))
    write_jsonl(
        os.path.join(d0, "train_batches.jsonl"),
        [{"step": s, "sample_ids": b} for s, b in enumerate(tlog["batches"])],
    )

    log.info("training initial classifier")
    c0, cinfo = train_initial(
        ctx.synthetic,
        channels=cfg.classifier_channels,
        steps=cfg.classifier_init_steps,
        lr=cfg.classifier_init_lr,
        batch_size=cfg.classifier_batch_size,
        seed=cfg.seed,
    )
    c0.save(os.path.join(d0, "classifier.ckpt"))
    log.info("initial classifier holdout accuracy %.3f", cinfo["holdout_accuracy"])

    log.info("inferring pool (%d conditions)", len(ctx.pool))
    albedos = infer_to_dir(
        base,
        ctx.pool,
        os.path.join(d0, "albedos"),
        cfg,
        derive_seed(cfg.seed, "pool-sample", 0),
    )
    store = LabelStore(os.path.join(ctx.run_dir, "labels.jsonl"))
    pos, neg = _initial_labels(ctx, albedos, store)
    pnsets = PNSets(iteration=0, positives=pos, negatives=neg)
    write_pnsets(d0, pnsets)

    init_scores = score_batch(
        c0, np.stack([albedos[p.sample_id] for p in ctx.pool]), cfg.infer_batch
    )
    _write_scores(
        os.path.join(d0, "pool_scores.jsonl"),
        "init",
        [
            {
                "condition_id": p.sample_id,
                "score": float(s),
                "model_hash": base.content_hash(),
                "classifier_hash": c0.content_hash(),
            }
            for p, s in zip(ctx.pool, init_scores)
        ],
    )

    eval_albedos = infer_to_dir(
        base,
        ctx.eval_set,
        os.path.join(d0, "eval_albedos"),
        cfg,
        derive_seed(cfg.seed, "eval-sample"),
    )
    report = evaluate_model(ctx, base, c0, eval_albedos, out_dir=d0)
    acc = eval_classifier(ctx, c0, d0)
    log.info(
        "iter 0: eval mse %.5f, classifier target accuracy %.3f",
        report["mse_mean"],
        acc,
    )

    ledger["iterations"].append(
        {
            "iteration": 0,
            "model_hash": base.content_hash(),
            "model_provenance": "base",
            "model_base_hash": None,
            "classifier_hash": c0.content_hash(),
            "classifier_holdout_accuracy": cinfo["holdout_accuracy"],
            "classifier_accuracy": acc,
            "pnset_sizes": {"positive": len(pos), "negative": len(neg)},
            "metrics": report,
            "trained_on": sorted(set(ids)),
            "negative_ids": [],
        }
    )
    write_ledger(ctx.run_dir, ledger)
    return LoopState(0, base, c0, pnsets, albedos)


# ---------------------------------------------------------------------------
# the iteration


def run_iteration(ctx: RunContext, state: LoopState) -> LoopState:
    """One update round: classifier fine-tune, pseudo-label partition, model
    fine-tune from base on positives only, pool re-inference, rectification."""
    cfg = ctx.cfg
    nxt = state.iteration + 1
    ledger = read_ledger(ctx.run_dir)
    if any(e["iteration"] == nxt for e in ledger["iterations"]):
        return load_state(ctx, nxt)
    dn = iter_dir(ctx.run_dir, nxt)
    os.makedirs(dn, exist_ok=True)
    base = Checkpoint.load(os.path.join(iter_dir(ctx.run_dir, 0), "model.ckpt"))
    if base.provenance != "base":
        raise PipelineError("iter_0 model is not the base checkpoint")
    scores_path = os.path.join(dn, "pool_scores.jsonl")

    # (1) classifier update on the previous P/N sets
    cnxt, _ = finetune_classifier(
        state.classifier,
        state.pnsets,
        steps=cfg.classifier_finetune_steps,
        lr=cfg.classifier_finetune_lr,
        batch_size=cfg.classifier_batch_size,
        seed=cfg.seed,
        provenance=f"iteration_{nxt}",
    )
    cnxt.save(os.path.join(dn, "classifier.ckpt"))

    # (2) score the current pool estimates, partition by absolute thresholds
    part_scores = score_batch(
        cnxt,
        np.stack([state.pool_albedos[p.sample_id] for p in ctx.pool]),
        cfg.infer_batch,
    )
    scored = [
        LabeledAlbedo(
            sample_id=p.sample_id,
            condition_id=p.sample_id,
            albedo=state.pool_albedos[p.sample_id],
            score=float(s),
            label="unlabeled",
            provenance="pseudo",
            iteration=nxt,
        )
        for p, s in zip(ctx.pool, part_scores)
    ]
    pos, neg, unassigned = partition(scored, cfg.tau_pos, cfg.tau_neg)
    _write_scores(
        scores_path,
        "partition",
        [
            {
                "condition_id": m.sample_id,
                "score": m.score,
                "assigned": m.label,
                "model_hash": state.model.content_hash(),
                "classifier_hash": cnxt.content_hash(),
            }
            for m in pos + neg + unassigned
        ],
    )
    if not pos:
        raise PipelineError(
            f"iteration {nxt}: positive set is empty at tau_pos={cfg.tau_pos}; "
            "no estimate scored high enough to train on. Lower tau_pos or "
            "improve the initial labels."
        )
    log.info(
        "iter %d: partition %d positive / %d negative / %d unassigned",
        nxt, len(pos), len(neg), len(unassigned),
    )

    # (3) model update from the base checkpoint on positives only
    rgb_by_id = ctx.pool_rgb
    train_pairs = [(m.albedo, rgb_by_id[m.sample_id]) for m in pos]
    train_ids = [m.sample_id for m in pos]
    mnxt, tlog = finetune(
        base,
        train_pairs,
        steps=cfg.model_finetune_steps,
        lr=cfg.model_finetune_lr,
        seed=cfg.seed,
        provenance=f"iteration_{nxt}",
        batch_size=cfg.model_batch_size,
        sample_ids=train_ids,
    )
    mnxt.save(os.path.join(dn, "model.ckpt"))
    write_jsonl(
        os.path.join(dn, "train_batches.jsonl"),
        [{"step": s, "sample_ids": b} for s, b in enumerate(tlog["batches"])],
    )
    neg_ids = {m.sample_id for m in neg}
    trained = {sid for batch in tlog["batches"] for sid in batch}
    if trained & neg_ids:
        raise PipelineError(
            f"negative-set samples leaked into model training: {sorted(trained & neg_ids)[:5]}"
        )

    # (4) re-infer the pool with the new model, re-score, rectify. Pool
    # draws are re-seeded per iteration: fresh samples give the classifier
    # new candidates to select from, so the kept positives improve round
    # over round instead of freezing at the first draw.
    albedos_nxt = infer_to_dir(
        mnxt,
        ctx.pool,
        os.path.join(dn, "albedos"),
        cfg,
        derive_seed(cfg.seed, "pool-sample", nxt),
    )
    rect_scores = score_batch(
        cnxt, np.stack([albedos_nxt[p.sample_id] for p in ctx.pool]), cfg.infer_batch
    )
    rect_by_id = {p.sample_id: float(s) for p, s in zip(ctx.pool, rect_scores)}
    _write_scores(
        scores_path,
        "rectify",
        [
            {
                "condition_id": p.sample_id,
                "score": rect_by_id[p.sample_id],
                "model_hash": mnxt.content_hash(),
                "classifier_hash": cnxt.content_hash(),
            }
            for p in ctx.pool
        ],
        append=True,
    )
    pn_nxt = rectify_sets(pos, neg, albedos_nxt, rect_by_id, cfg.tau_rectify, nxt)
    write_pnsets(dn, pn_nxt)
    log.info(
        "iter %d: rectified sets %d positive / %d negative (dropped %d)",
        nxt, len(pn_nxt.positives), len(pn_nxt.negatives),
        len(neg) - len(pn_nxt.negatives),
    )

    eval_albedos = infer_to_dir(
        mnxt,
        ctx.eval_set,
        os.path.join(dn, "eval_albedos"),
        cfg,
        derive_seed(cfg.seed, "eval-sample"),
    )
    report = evaluate_model(ctx, mnxt, cnxt, eval_albedos, out_dir=dn)
    acc = eval_classifier(ctx, cnxt, dn)
    log.info(
        "iter %d: eval mse %.5f, classifier target accuracy %.3f",
        nxt, report["mse_mean"], acc,
    )

    ledger = read_ledger(ctx.run_dir)
    ledger["iterations"].append(
        {
            "iteration": nxt,
            "model_hash": mnxt.content_hash(),
            "model_provenance": f"iteration_{nxt}",
            "model_base_hash": tlog["base_hash"],
            "classifier_hash": cnxt.content_hash(),
            "classifier_accuracy": acc,
            "partition_sizes": {
                "positive": len(pos),
                "negative": len(neg),
                "unassigned": len(unassigned),
            },
            "pnset_sizes": {
                "positive": len(pn_nxt.positives),
                "negative": len(pn_nxt.negatives),
            },
            "metrics": report,
            "trained_on": sorted(set(train_ids)),
            "negative_ids": sorted(neg_ids),
        }
    )
    write_ledger(ctx.run_dir, ledger)
    return LoopState(nxt, mnxt, cnxt, pn_nxt, albedos_nxt)


def load_state(ctx: RunContext, iteration: int) -> LoopState:
    """Rebuild a LoopState from persisted iteration artifacts."""
    d = iter_dir(ctx.run_dir, iteration)
    model = Checkpoint.load(os.path.join(d, "model.ckpt"))
    clf = Checkpoint.load(os.path.join(d, "classifier.ckpt"))
    pnsets = load_pnsets(d, iteration)
    albedos = _load_albedo_dir(os.path.join(d, "albedos"), ctx.pool)
    return LoopState(iteration, model, clf, pnsets, albedos)


def run_loop(ctx: RunContext, n: int) -> LoopState:
    """initialize + n sequential iterations, resuming past completed work."""
    if n < 1:
        raise ConfigError(f"iteration count must be >= 1, got {n}")
    write_config(ctx.run_dir, ctx.cfg)
    ledger = read_ledger(ctx.run_dir)
    done = {e["iteration"] for e in ledger["iterations"]}
    if done:
        state = load_state(ctx, max(done))
    else:
        state = initialize(ctx)
    while state.iteration < n:
        state = run_iteration(ctx, state)
    return state


# ---------------------------------------------------------------------------
# preference-based refinement stage


def run_dpo(ctx: RunContext, out_name: str = "dpo", corrupt_frac: float = 0.0) -> dict:
    """Preference fine-tune of the final loop model.

    Every iteration's model re-infers the pool under a single shared noise
    draw (cached in run/pair_albedos by model hash); the final classifier
    scores those estimates, and for each condition the last iteration's
    estimate is the winner against each earlier iteration's, kept only when
    its score is strictly higher. The uncorrupted manifest is canonical at
    run/pairs.jsonl; the out dir gets the manifest actually trained on
    (with any corrupted flags set).
    """
    cfg = ctx.cfg
    if not 0.0 <= corrupt_frac <= 1.0:
        raise ConfigError(f"corrupt_frac must be in [0, 1], got {corrupt_frac}")
    from .dpo import corrupt_pairs, dpo_finetune, pair_manifest_rows
    from .pseudolabel import build_preference_pairs

    ledger = read_ledger(ctx.run_dir)
    done = sorted(e["iteration"] for e in ledger["iterations"])
    if len(done) < 2:
        raise PipelineError(
            "preference stage needs at least two completed iterations "
            f"(found {len(done)}); run the loop first"
        )
    n = done[-1]
    dlast = iter_dir(ctx.run_dir, n)
    cfinal = Checkpoint.load(os.path.join(dlast, "classifier.ckpt"))
    mlast = Checkpoint.load(os.path.join(dlast, "model.ckpt"))

    conditions = [(p.sample_id, p.rgb) for p in ctx.pool]
    # A preference between two estimates should reflect model difference,
    # not sampling luck, so every iteration's model re-infers the pool under
    # one shared noise draw before judging. The loop's cached pool albedos
    # use per-iteration draws and are unsuitable: comparing them mixes the
    # models' quality gap with draw-to-draw variation.
    pair_seed = derive_seed(cfg.seed, "pair-sample")
    albedos_by_iter, scores_by_iter = {}, {}
    for i in range(n + 1):
        mdl = Checkpoint.load(os.path.join(iter_dir(ctx.run_dir, i), "model.ckpt"))
        adir = os.path.join(ctx.run_dir, "pair_albedos", f"iter_{i}")
        marker = os.path.join(adir, "model_hash")
        cached = (
            os.path.exists(marker)
            and open(marker).read().strip() == mdl.content_hash()
        )
        if cached:
            albedos = _load_albedo_dir(adir, ctx.pool)
        else:
            albedos = infer_to_dir(mdl, ctx.pool, adir, cfg, pair_seed)
            with open(marker, "w") as fh:
                fh.write(mdl.content_hash() + "\n")
        scores = score_batch(
            cfinal, np.stack([albedos[p.sample_id] for p in ctx.pool]), cfg.infer_batch
        )
        albedos_by_iter[i] = albedos
        scores_by_iter[i] = {
            p.sample_id: float(s) for p, s in zip(ctx.pool, scores)
        }
    pairs = build_preference_pairs(
        conditions, albedos_by_iter, scores_by_iter, win_iter=n,
        lose_iters=list(range(n)),
    )
    if not pairs:
        raise PipelineError(
            "no preference pairs: the final model never outscored earlier ones"
        )
    write_jsonl(os.path.join(ctx.run_dir, "pairs.jsonl"), pair_manifest_rows(pairs))
    if corrupt_frac > 0.0:
        pairs = corrupt_pairs(pairs, corrupt_frac, derive_seed(cfg.seed, "dpo-corrupt"))

    out = os.path.join(ctx.run_dir, out_name)
    os.makedirs(out, exist_ok=True)
    write_jsonl(os.path.join(out, "pairs.jsonl"), pair_manifest_rows(pairs))
    log.info("preference fine-tune on %d pairs (corrupt_frac=%.3f)", len(pairs), corrupt_frac)
    ckpt, dlog = dpo_finetune(
        mlast,
        pairs,
        steps=cfg.dpo_steps,
        lr=cfg.dpo_lr,
        beta=cfg.dpo_beta,
        seed=cfg.seed,
        pair_batch=cfg.dpo_pair_batch,
    )
    ckpt.save(os.path.join(out, "model.ckpt"))

    eval_albedos = infer_to_dir(
        ckpt,
        ctx.eval_set,
        os.path.join(out, "eval_albedos"),
        cfg,
        derive_seed(cfg.seed, "eval-sample"),
    )
    report = evaluate_model(ctx, ckpt, cfinal, eval_albedos, out_dir=out)
    entry = {
        "model_hash": ckpt.content_hash(),
        "base_hash": dlog["base_hash"],
        "judge_classifier_hash": cfinal.content_hash(),
        "n_pairs": len(pairs),
        "corrupt_frac": corrupt_frac,
        "tail_mean_loss": dlog["tail_mean_loss"],
        "metrics": report,
        "pre_iteration": n,
    }
    ledger = read_ledger(ctx.run_dir)
    ledger["dpo"][out_name] = entry
    write_ledger(ctx.run_dir, ledger)
    log.info(
        "preference stage: mse %.5f (pre %.5f), negative ratio %.3f",
        report["mse_mean"],
        next(e for e in ledger["iterations"] if e["iteration"] == n)["metrics"]["mse_mean"],
        report["negative_ratio"],
    )
    return entry
