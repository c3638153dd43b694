"""Training, evaluation, sweeps and gradient checks driven by a RunConfig."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, quantize, save_tensors
from .episodes import EpisodeSpec, gen_synth, load_dataset, sample_episode, sample_gfsl_episode, split_classes
from .errors import ConfigError, LoadError
from .gradcheck import grad_check
from .model import KINDS, FewShotModel, ModelConfig
from .optim import adam_step
from .rtc import evaluate_rtc
from .text import Vocabulary, build_vocab, tokenize

METRIC_FIELDS = ("step", "train_loss", "eval_accuracy", "setting", "ms_per_query")

# independent random streams derived from one seed
_TRAIN, _DROPOUT, _VAL, _EVAL = 1, 2, 3, 4


def _rng(seed, stream):
    return np.random.default_rng([seed, stream])


def eval_rng(seed):
    """The random stream every evaluation command samples its episodes from."""
    return _rng(seed, _EVAL)


def load_data(cfg):
    """The configured JSONL dataset, or the synthetic corpus when none is given."""
    if cfg.dataset:
        return load_dataset(cfg.dataset, cfg.min_per_class)
    return gen_synth(cfg.synth_classes, cfg.synth_per_class, cfg.synth_vocab, cfg.synth_noise,
                     cfg.synth_seed, signature_size=cfg.synth_signature)


class Tokens:
    """Per-instance TokenSeqs of a dataset, built once."""

    def __init__(self, dataset, vocab, max_seq_len):
        self.seqs = [tokenize(t, vocab, max_seq_len) for t in dataset.texts]

    def episode(self, ep):
        support = [[self.seqs[i] for i in row] for row in ep.support]
        return support, [self.seqs[i] for i in ep.query]


def write_metrics(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def append_metrics(path, rows):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def metric_row(step, train_loss, accuracy, setting, ms=None):
    return {"step": step,
            "train_loss": "" if train_loss is None else f"{train_loss:.6f}",
            "eval_accuracy": f"{accuracy:.6f}",
            "setting": setting,
            "ms_per_query": "" if ms is None else f"{ms:.3f}"}


def vocab_path(checkpoint):
    return Path(str(checkpoint) + ".vocab")


def save_model(path, model, vocab, meta):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta, model=model.cfg.to_dict(), vocab_size=len(vocab))
    save_tensors(path, {name: p.data for name, p in model.params.items()}, meta)
    vocab.save(vocab_path(path))


def load_model(path, cfg):
    """Load a checkpoint into a model shaped by ``cfg``; shapes must agree tensor by tensor."""
    tensors, meta = load_tensors(path)
    vpath = vocab_path(path)
    if not vpath.exists():
        raise LoadError(f"vocabulary file {vpath} not found next to checkpoint")
    vocab = Vocabulary.load(vpath)
    model = FewShotModel(cfg.model_config(), len(vocab), seed=0)
    expected = {name: p.shape for name, p in model.params.items()}
    for name, shape in expected.items():
        if name not in tensors:
            raise LoadError(f"checkpoint {path} lacks tensor {name!r}")
        if tensors[name].shape != shape:
            raise LoadError(f"tensor {name!r} has shape {tensors[name].shape} in {path}, "
                            f"config expects {shape}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise LoadError(f"checkpoint {path} has tensors the config does not: {extra[0]!r}")
    model.params.load_values({name: tensors[name] for name in expected})
    return model, vocab, meta


def episode_accuracy(model, tokens, episodes):
    correct = total = 0
    for ep in episodes:
        support, query = tokens.episode(ep)
        pred = model.predict(support, query)
        correct += int((pred == np.asarray(ep.labels)).sum())
        total += len(ep.labels)
    return correct / total


def fsl_episodes(dataset, classes, spec, count, rng):
    return [sample_episode(dataset, classes, spec, rng) for _ in range(count)]


def gfsl_episodes(dataset, split, spec, count, rng):
    return [sample_gfsl_episode(dataset, split, spec.k_shot, spec.n_query, rng) for _ in range(count)]


@dataclass
class TrainResult:
    model: FewShotModel
    vocab: Vocabulary
    rows: list
    best_step: int
    best_val: float | None
    final_loss: float | None
    split: object = None
    dataset: object = None
    losses: list = field(default_factory=list)


def train(cfg, dataset=None, out_dir=None, log=None):
    """Episodic training with periodic validation; keeps the best-by-validation weights.

    Validation runs every ``val_every`` steps and after the last step, on the
    same ``val_episodes`` episodes each time.  The kept weights are rounded to
    float32 so the in-memory model equals its saved checkpoint.
    """
    log = log or (lambda msg: None)
    dataset = load_data(cfg) if dataset is None else dataset
    dataset.check_min_size(cfg.k_shot + 1)
    vocab = build_vocab(dataset.texts)
    tokens = Tokens(dataset, vocab, cfg.max_seq_len)
    split = split_classes(dataset.num_classes, cfg.split_seed, gfsl=cfg.gfsl)
    spec = cfg.episode_spec()
    model = FewShotModel(cfg.model_config(), len(vocab), seed=cfg.seed)
    log(f"{cfg.model}: {model.params.count()} parameters, vocabulary {len(vocab)}")

    train_classes = split.seen if cfg.gfsl else split.train
    val_spec = EpisodeSpec(min(spec.n_way, len(split.val)), spec.k_shot, spec.n_query)
    val_eps = fsl_episodes(dataset, split.val, val_spec, cfg.val_episodes, _rng(cfg.seed, _VAL))
    setting = f"fsl{val_spec.n_way}"
    rng, drng = _rng(cfg.seed, _TRAIN), _rng(cfg.seed, _DROPOUT)

    rows, losses, window = [], [], []
    best_val, best_step, best = None, 0, model.params.snapshot()
    for step in range(1, cfg.steps + 1):
        ep = sample_episode(dataset, train_classes, spec, rng)
        support, query = tokens.episode(ep)
        loss = model.loss(support, query, ep.labels, training=True, rng=drng)
        loss.backward()
        adam_step(model.params, cfg.lr)
        losses.append(loss.item())
        window.append(loss.item())
        if step % cfg.val_every == 0 or step == cfg.steps:
            acc = episode_accuracy(model, tokens, val_eps)
            mean_loss = float(np.mean(window))
            rows.append(metric_row(step, mean_loss, acc, setting))
            log(f"step {step}: train loss {mean_loss:.4f}, val accuracy {acc:.4f}")
            window = []
            if best_val is None or acc > best_val:
                best_val, best_step, best = acc, step, model.params.snapshot()

    model.params.load_values(quantize(best))
    final_loss = float(np.mean(losses[-cfg.val_every:])) if losses else None
    result = TrainResult(model, vocab, rows, best_step, best_val, final_loss, split, dataset, losses)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.ckpt"
        save_model(ckpt, model, vocab, {"best_step": best_step, "best_val": best_val,
                                        "split_seed": cfg.split_seed, "seed": cfg.seed})
        write_metrics(out / "metrics.csv", rows)
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        (out / "split.json").write_text(json.dumps(split.manifest(dataset), indent=1) + "\n",
                                        encoding="utf-8")
    return result


def evaluate_fsl(model, vocab, dataset, cfg, n_way=None):
    """Mean N-way K-shot accuracy over ``eval_episodes`` episodes from test classes."""
    split = split_classes(dataset.num_classes, cfg.split_seed, gfsl=cfg.gfsl)
    spec = EpisodeSpec(n_way or cfg.n_way, cfg.k_shot, cfg.n_query)
    eps = fsl_episodes(dataset, split.test, spec, cfg.eval_episodes, eval_rng(cfg.seed))
    return episode_accuracy(model, Tokens(dataset, vocab, cfg.max_seq_len), eps)


def evaluate_gfsl(model, vocab, dataset, cfg):
    """Mean C-way accuracy over every class, one query at a time per prepared episode."""
    split = split_classes(dataset.num_classes, cfg.split_seed, gfsl=True)
    tokens = Tokens(dataset, vocab, cfg.max_seq_len)
    correct = total = 0
    for ep in gfsl_episodes(dataset, split, cfg.episode_spec(), cfg.eval_episodes, eval_rng(cfg.seed)):
        support, query = tokens.episode(ep)
        prepared = model.prepare_support(support)
        for seq, label in zip(query, ep.labels):
            logits = model.query_logits(prepared, [seq])
            correct += int(np.argmax(logits.data[0])) == label
            total += 1
    return correct / total


def run_rtc(model, vocab, dataset, cfg):
    """RTC and full C-way results on the same episodes ``evaluate_gfsl`` would draw."""
    if model.kind != "mgimn":
        raise ConfigError("retrieval-then-classify runs on an MGIMN model")
    split = split_classes(dataset.num_classes, cfg.split_seed, gfsl=True)
    eps = gfsl_episodes(dataset, split, cfg.episode_spec(), cfg.eval_episodes, eval_rng(cfg.seed))
    rcfg = cfg.rtc_config()
    if rcfg.shots_k != cfg.k_shot:
        raise ConfigError(f"shots_k ({rcfg.shots_k}) must equal k_shot ({cfg.k_shot}) for RTC episodes")
    return evaluate_rtc(model, vocab, dataset, eps, rcfg, cfg.timing_warmup, cfg.timing_queries)


@dataclass
class SweepReport:
    members: list  # dicts: split_seed, seed, accuracy
    mean: float
    std: float

    def rows(self):
        out = [dict(m) for m in self.members]
        out.append({"split_seed": "mean", "seed": "", "accuracy": self.mean})
        out.append({"split_seed": "std", "seed": "", "accuracy": self.std})
        return out


def sweep(cfg, dataset=None, log=None):
    """Train and evaluate over split seeds x init seeds; aggregate test accuracy."""
    log = log or (lambda msg: None)
    dataset = load_data(cfg) if dataset is None else dataset
    members = []
    for split_seed in range(cfg.sweep_split_seeds):
        for seed in range(cfg.sweep_init_seeds):
            member = cfg.replace(split_seed=split_seed, seed=seed)
            result = train(member, dataset)
            acc = evaluate_fsl(result.model, result.vocab, dataset, member)
            log(f"split {split_seed} seed {seed}: accuracy {acc:.4f}")
            members.append({"split_seed": split_seed, "seed": seed, "accuracy": acc})
    accs = np.array([m["accuracy"] for m in members])
    return SweepReport(members, float(accs.mean()), float(accs.std()))


def grad_check_models(cfg, kinds=KINDS, tolerance=1e-4):
    """Finite-difference check of every parameter of each model on one fixed episode."""
    if cfg.dropout > 0:
        raise ConfigError("grad-check needs dropout = 0 (the check requires a deterministic loss)")
    if cfg.hidden > 16 or cfg.n_way > 3 or cfg.k_shot > 2:
        raise ConfigError("grad-check needs a tiny config: hidden <= 16, n_way <= 3, k_shot <= 2")
    dataset = gen_synth(max(cfg.n_way, 3), cfg.k_shot + 2, 12 * max(cfg.n_way, 3), 0.3, cfg.seed,
                        signature_size=2, length=(3, 5))
    vocab = build_vocab(dataset.texts)
    tokens = Tokens(dataset, vocab, cfg.max_seq_len)
    spec = EpisodeSpec(cfg.n_way, cfg.k_shot, min(cfg.n_query, 2))
    ep = sample_episode(dataset, range(dataset.num_classes), spec, _rng(cfg.seed, _TRAIN))
    support, query = tokens.episode(ep)
    reports = {}
    for kind in kinds:
        mcfg = ModelConfig(kind=kind, hidden=cfg.hidden, layers=cfg.layers, heads=cfg.heads,
                           max_seq_len=cfg.max_seq_len, dropout=0.0, flags=cfg.flags())
        model = FewShotModel(mcfg, len(vocab), seed=cfg.seed)
        reports[kind] = grad_check(lambda p: model.loss(support, query, ep.labels, training=False),
                                   model.params, tolerance=tolerance)
    return reports
