"""Select-then-semi training loop with warm-up, one or two networks, and presets."""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import selection as sel
from .data import epoch_batches
from .nncore import ce_loss_and_grad, init_mlp, init_opt, mlp_forward, one_hot, softmax
from .ssl import (BackboneConfig, BackboneState, SslBatch, ce_only_step, mixmatch_step, pseudo_label_step,
                  temporal_ensembling_step)

log = logging.getLogger(__name__)

SCHEDULES = ("mini_batch", "epoch_level")
NETWORKS = ("single", "dual")


@dataclass
class RunConfig:
    selector: sel.SelectorConfig = field(default_factory=sel.SelectorConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    schedule: str = "mini_batch"
    networks: str = "single"
    epochs: int = 60
    batch_size: int = 64
    warmup_epochs: int = 5
    hidden: int = 256
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epoch: int = 0  # 0 disables the single step decay
    lr_decay_factor: float = 0.1
    seed: int = 0
    preset: str = ""

    def validate(self):
        problems = self.selector.validate() + self.backbone.validate()
        if self.schedule not in SCHEDULES:
            problems.append(f"engine.schedule must be one of {', '.join(SCHEDULES)}, got {self.schedule!r}")
        if self.networks not in NETWORKS:
            problems.append(f"engine.networks must be one of {', '.join(NETWORKS)}, got {self.networks!r}")
        if self.networks == "dual" and not self.selector.gives_posterior:
            problems.append(f"dual networks need a posterior-producing selector (gmm or oracle), "
                            f"got {self.selector.kind!r}")
        if self.epochs < 0:
            problems.append("engine.epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("engine.batch_size must be >= 1")
        if self.warmup_epochs < 0:
            problems.append("engine.warmup_epochs must be >= 0")
        if self.hidden < 1:
            problems.append("model.hidden must be >= 1")
        if self.lr <= 0:
            problems.append("engine.lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            problems.append("engine.momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            problems.append("engine.weight_decay must be nonnegative")
        if self.lr_decay_epoch < 0 or self.lr_decay_factor <= 0:
            problems.append("engine.lr_decay_epoch must be >= 0 and engine.lr_decay_factor positive")
        return problems


class ConfigError(ValueError):
    pass


PRESETS = {
    # name: (selector kind, backbone kind, schedule, networks)
    "gpl": ("gmm", "pseudo_label", "mini_batch", "single"),
    "dividemix_plus": ("gmm", "mixmatch", "mini_batch", "dual"),
    "dividemix_epoch": ("gmm", "mixmatch", "epoch_level", "dual"),
    "spd_ce": ("spd", "ce_only", "mini_batch", "single"),
    "spd_te": ("spd", "temporal_ensembling", "mini_batch", "single"),
    "spd_mixmatch": ("spd", "mixmatch", "mini_batch", "single"),
    "spd_pl": ("spd", "pseudo_label", "mini_batch", "single"),
    # baseline: every given label trusted, plain CE for the whole run
    "ce": ("gmm", "ce_only", "mini_batch", "single"),
}

# per-backbone unsupervised weights used by the presets
_LAMBDA_U = {"mixmatch": 25.0, "temporal_ensembling": 10.0, "pseudo_label": 0.0, "ce_only": 0.0}


def instantiate(name, base=None):
    """Preset ``RunConfig`` for a named instantiation.

    ``base`` supplies the non-preset fields (epochs, optimizer, ...).
    ``ce`` is the cross-entropy baseline: every epoch is a warm-up epoch, so
    it trains on all given labels with no selection at all.
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}")
    s_kind, b_kind, schedule, networks = PRESETS[name]
    base = base or RunConfig()
    backbone = replace(base.backbone, kind=b_kind, lambda_u=_LAMBDA_U[b_kind],
                       mixmatch_prior=1.0 if name.startswith("dividemix") else 0.0)
    cfg = replace(base, selector=replace(base.selector, kind=s_kind), backbone=backbone,
                  schedule=schedule, networks=networks, preset=name)
    if name == "ce":
        cfg = replace(cfg, warmup_epochs=cfg.warmup_epochs + cfg.epochs, epochs=0)
    return cfg


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    test_acc: float
    sel_precision: float
    sel_recall: float
    clean_frac: float
    phase: str = "ssl"


@dataclass
class RunReport:
    rows: list = field(default_factory=list)
    # per-epoch instrumentation: counts of selections and updates per network
    counters: list = field(default_factory=list)
    # per-network test accuracy after each epoch (two entries in dual mode)
    member_acc: list = field(default_factory=list)

    @property
    def final_acc(self):
        return self.rows[-1].test_acc if self.rows else float("nan")

    @property
    def best_acc(self):
        return max(r.test_acc for r in self.rows) if self.rows else float("nan")

    def mean_acc_last(self, k=10):
        tail = self.rows[-k:]
        return float(np.mean([r.test_acc for r in tail])) if tail else float("nan")

    def ssl_rows(self):
        return [r for r in self.rows if r.phase == "ssl"]


class Net:
    """One network with its optimiser and per-backbone state."""

    def __init__(self, n_input, n_classes, n_rows, cfg, rng):
        self.params = init_mlp(n_input, cfg.hidden, n_classes, rng)
        self.opt = init_opt(self.params, cfg.lr, cfg.momentum, cfg.weight_decay)
        self.state = BackboneState(n_rows, n_classes)
        self.window = sel.LossWindow(cfg.selector.window) if cfg.selector.window else None


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(models, x, chunk=4096):
    """Argmax prediction; with several models their softmax outputs are averaged."""
    if not isinstance(models, (list, tuple)):
        models = [models]
    out = []
    for i in range(0, len(x), chunk):
        xb = x[i:i + chunk]
        if len(models) == 1:
            out.append(np.argmax(mlp_forward(models[0], xb), axis=1))
        else:
            p = sum(softmax(mlp_forward(m, xb)) for m in models) / len(models)
            out.append(np.argmax(p, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(models, test):
    """Fraction of argmax predictions equal to the test set's true labels."""
    if test.n == 0:
        raise ValueError("empty test set")
    return float(np.count_nonzero(predict(models, test.features) == test.true_labels) / test.n)


# ---------------------------------------------------------------------------
# warm-up
# ---------------------------------------------------------------------------

def warmup(params, opt, dataset, warmup_epochs, batch_size=64, seed=0):
    """Plain CE training on every given label; returns ``params`` (updated in place)."""
    for e in range(warmup_epochs):
        for mb in epoch_batches(dataset, batch_size, _epoch_seed(seed, e, warm=True)):
            ce_only_step(params, opt, mb.features, one_hot(mb.given_labels, dataset.n_classes))
    return params


def _epoch_seed(seed, epoch, warm=False):
    return [int(seed), int(epoch), 1 if warm else 0]


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

def _select(cfg, params, x, given, truth_fn, window=None):
    """Partition rows ``x`` using the network ``params``.  ``truth_fn`` is only
    called by the oracle selector."""
    kind = cfg.kind
    if kind == "oracle":
        return sel.select_oracle(given, truth_fn())
    logits = mlp_forward(params, x)
    if kind == "spd":
        return sel.select_spd(logits, given)
    losses, _ = ce_loss_and_grad(logits, one_hot(given, logits.shape[1]))
    if kind == "gmm":
        return sel.select_gmm(losses, cfg, window)
    return sel.select_small_loss(losses, cfg.keep_fraction)


def _lookup(cache, rows):
    mask, post = cache
    return sel.BatchPartition.from_mask(mask[rows], post[rows])


def _backbone_step(cfg, net, peer, batch, rng, progress, bounds):
    b = cfg.backbone
    guessers = [net.params, peer.params] if peer is not None else None
    if b.kind == "ce_only":
        return ce_only_step(net.params, net.opt, batch.x_lab, batch.t_lab)
    if b.kind == "temporal_ensembling":
        return temporal_ensembling_step(net.params, net.opt, net.state, batch, b, rng, progress, bounds)
    if b.kind == "mixmatch":
        return mixmatch_step(net.params, net.opt, batch, b, rng, progress, guessers, bounds)
    return pseudo_label_step(net.params, net.opt, batch, b, rng, guessers, bounds)


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------

def train_seminll(config, train, test, on_epoch=None):
    """Warm up, then run ``config.epochs`` epochs of per-batch select-then-semi.

    In ``dual`` mode network A is updated from partitions computed by network
    B and vice versa (A first, then B, on every batch).  Labeled targets are
    co-refined as ``w * one_hot(given) + (1 - w) * own prediction`` with
    ``w`` the partner's clean posterior; unlabeled guesses average both
    networks.  ``on_epoch(row, models)`` is called after every epoch with the
    live parameters.  Returns ``(list of MlpParams, RunReport)``.
    """
    problems = config.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    ss = np.random.SeedSequence(config.seed)
    init_ss, step_ss = ss.spawn(2)
    n_nets = 2 if config.networks == "dual" else 1
    nets = [Net(train.dim, train.n_classes, train.n, config, np.random.default_rng(s))
            for s in init_ss.spawn(n_nets)]
    step_rng = np.random.default_rng(step_ss)
    c = train.n_classes
    bounds = train.bounds
    report = RunReport()
    truth_clean = None

    def _truth_clean():
        # reporting only; never feeds back into training
        nonlocal truth_clean
        if truth_clean is None:
            truth_clean = train.given_labels == train.true_labels
        return truth_clean

    def _emit(row):
        report.rows.append(row)
        report.member_acc.append([evaluate(n.params, test) for n in nets])
        if on_epoch is not None:
            on_epoch(row, models)
        log.info("epoch %d (%s) loss=%.4f acc=%.4f prec=%.3f rec=%.3f clean=%.3f", row.epoch, row.phase,
                 row.train_loss, row.test_acc, row.sel_precision, row.sel_recall, row.clean_frac)

    models = [n.params for n in nets]
    epoch = 0
    for e in range(config.warmup_epochs):
        losses = []
        for mb in epoch_batches(train, config.batch_size, _epoch_seed(config.seed, e, warm=True)):
            t = one_hot(mb.given_labels, c)
            for net in nets:
                losses.append(ce_only_step(net.params, net.opt, mb.features, t))
        base = float(np.mean(_truth_clean()))
        report.counters.append({"select": [0] * n_nets, "full_select": [0] * n_nets,
                                "update": [len(losses) // n_nets] * n_nets})
        _emit(EpochRow(epoch, float(np.mean(losses)), evaluate(models, test), base, 1.0, 1.0, "warmup"))
        epoch += 1

    for e in range(config.epochs):
        if config.lr_decay_epoch and e == config.lr_decay_epoch:
            for net in nets:
                net.opt.lr *= config.lr_decay_factor
        batches = epoch_batches(train, config.batch_size, _epoch_seed(config.seed, e))
        counts = {"select": [0] * n_nets, "full_select": [0] * n_nets, "update": [0] * n_nets}
        caches = None
        if config.schedule == "epoch_level":
            caches = []
            for k, net in enumerate(nets):
                chooser = nets[1 - k] if n_nets == 2 else net
                part = _select(config.selector, chooser.params, train.features, train.given_labels,
                               lambda: train.true_labels)
                mask = np.zeros(train.n, dtype=bool)
                mask[part.clean] = True
                caches.append((mask, part.clean_posterior))
                counts["full_select"][k] += 1
        losses, precs, recs = [], [], []
        n_clean = n_seen = 0
        for b_i, mb in enumerate(batches):
            progress = e + b_i / len(batches)
            for k, net in enumerate(nets):
                peer = nets[1 - k] if n_nets == 2 else None
                if caches is not None:
                    part = _lookup(caches[k], mb.indices)
                else:
                    chooser = peer if peer is not None else net
                    part = _select(config.selector, chooser.params, mb.features, mb.given_labels,
                                   lambda: train.true_labels[mb.indices], chooser.window)
                    counts["select"][k] += 1
                p, r = sel.selection_metrics(part, _truth_clean()[mb.indices])
                precs.append(p)
                recs.append(r)
                n_clean += len(part.clean)
                n_seen += len(mb)

                t_lab = one_hot(mb.given_labels[part.clean], c)
                x_lab = mb.features[part.clean]
                if peer is not None and len(part.clean):
                    w = part.clean_posterior[part.clean][:, None]
                    own = softmax(mlp_forward(net.params, x_lab))
                    t_lab = w * t_lab + (1.0 - w) * own
                batch = SslBatch(x_lab, t_lab, mb.features[part.unlabeled],
                                 mb.indices[part.clean], mb.indices[part.unlabeled])
                losses.append(_backbone_step(config, net, peer, batch, step_rng, progress, bounds))
                counts["update"][k] += 1
        report.counters.append(counts)
        _emit(EpochRow(epoch, float(np.mean(losses)), evaluate(models, test), float(np.mean(precs)),
                       float(np.mean(recs)), n_clean / max(n_seen, 1)))
        epoch += 1
    return models, report


def train_supervised(train, test, epochs, config, mask=None):
    """Reference run: plain CE on ``train`` (optionally restricted to ``mask`` rows)."""
    data = train.subset(np.flatnonzero(mask)) if mask is not None else train
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[0].spawn(1)[0])
    params = init_mlp(train.dim, config.hidden, train.n_classes, rng)
    opt = init_opt(params, config.lr, config.momentum, config.weight_decay)
    warmup(params, opt, data, epochs, config.batch_size, config.seed)
    return params, evaluate(params, test)
