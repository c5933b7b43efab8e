"""Command-line interface.

Subcommands: ``attack``, ``eval``, ``oracle``, ``verify-region`` and
``sampler-stats``.  Exit status is 0 on success, 2 on bad input and 3 on a
numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np

from . import io as lio
from .attack import POLICIES, AttackConfig, attack_point, trace_statistics
from .errors import AttackError, ConfigError, NumericError
from .net import classify_batch, forward, frozen_jvp, affine_offsets, pattern_at, pattern_of
from .oracle import exact_min_perturbation
from .qpsolve import QpConfig
from .region import build_region

logger = logging.getLogger("lrattack")

EXIT_INPUT = 2
EXIT_NUMERIC = 3
WORKERS_ENV = "LRATTACK_WORKERS"


def parse_indices(spec, n):
    """``a..b`` (half-open), comma lists, or ``all``."""
    if spec in (None, "all"):
        return list(range(n))
    out = []
    for part in spec.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..", 1)
            out.extend(range(int(a) if a else 0, int(b) if b else n))
        elif part:
            out.append(int(part))
    bad = [i for i in out if not 0 <= i < n]
    if bad:
        raise ConfigError(f"indices out of range for {n} points: {bad[:5]}")
    return out


def parse_floats(spec):
    return [float(v) for v in spec.split(",") if v.strip()]


# --------------------------------------------------------------------------
# shared attack plumbing

_WORKER = {}


def _init_worker(model, precision, train, cfg):
    net = lio.load_model(model, np.float64 if precision == "f64" else np.float32)
    tr = lio.load_dataset(train)
    _WORKER.update(net=net, train=tr, cfg=cfg, train_pred=classify_batch(net, tr.images))


def _attack_one(job):
    index, x, label = job
    net, cfg = _WORKER["net"], _WORKER["cfg"]
    pred = int(classify_batch(net, x[None])[0])
    if pred != label:
        return lio.PointRecord(index, int(label), pred, 0.0, seed=cfg.seed), None
    tr = _WORKER["train"]
    try:
        res = attack_point(net, x, tr.images, tr.labels, cfg, point_index=index,
                           train_pred=_WORKER["train_pred"])
    except AttackError as e:
        logger.warning("point %d: %s", index, e)
        return lio.PointRecord(index, int(label), pred, float("inf"), seed=cfg.seed), None
    rec = lio.PointRecord(index, int(label), pred, float(res.norm), res.regions_solved,
                          res.cache_hits, res.pruned, cfg.seed)
    return rec, res.trace


def run_attacks(model, data, train, indices, cfg, precision="f32", workers=1):
    """Attack the selected points; yields ``(PointRecord, trace)`` in index order."""
    ds = lio.load_dataset(data)
    jobs = [(i, np.asarray(ds.images[i]), int(ds.labels[i])) for i in indices]
    if workers <= 1:
        _init_worker(model, precision, train, cfg)
        for job in jobs:
            yield _attack_one(job)
        return
    with ProcessPoolExecutor(workers, initializer=_init_worker,
                             initargs=(model, precision, train, cfg)) as pool:
        yield from pool.map(_attack_one, jobs)


def _attack_config(args):
    qp = QpConfig(max_iters=args.qp_iters)
    return AttackConfig(
        n_regions=args.n_regions, n_starts=args.starts, q=args.q, gamma=args.gamma,
        seed=args.seed, kappa=args.kappa, qp=qp, policy=args.policy, target=args.targeted,
    )


def _config_snapshot(cfg, args):
    d = asdict(cfg)
    d["precision"] = args.precision
    return d


def _load(args):
    net = lio.load_model(args.model, np.float64 if args.precision == "f64" else np.float32)
    ds = lio.load_dataset(args.data)
    ds.validate(net.num_classes)
    return net, ds


def _out(args):
    return open(args.out, "w") if getattr(args, "out", None) else sys.stdout


# --------------------------------------------------------------------------
# subcommands


def cmd_attack(args):
    net, ds = _load(args)
    indices = parse_indices(args.indices, len(ds))
    cfg = _attack_config(args)
    train = args.train or args.data
    header = lio.RunHeader(_config_snapshot(cfg, args), lio.model_digest(args.model), indices, "attack")
    out = _out(args)
    try:
        out.write(header.to_json() + "\n")
        for rec, _ in run_attacks(args.model, args.data, train, indices, cfg, args.precision, args.workers):
            out.write(rec.to_json() + "\n")
            out.flush()
            logger.info("point %d: norm %.6g", rec.index, rec.norm)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def robust_accuracy(records, thresholds):
    """Fraction of points whose adversarial norm exceeds each threshold."""
    norms = np.array([r.norm for r in records], dtype=np.float64)
    if norms.size == 0:
        raise ConfigError("no point records")
    return [float(np.mean(norms > eps)) for eps in thresholds]


def cmd_eval(args):
    header, points = lio.read_records(args.records)
    if header is not None and header.indices:
        have = {p.index for p in points}
        missing = [i for i in header.indices if i not in have]
        if missing:
            raise ConfigError(f"records missing for indices {missing}")
    eps = sorted(set([0.0] + parse_floats(args.eps)))
    acc = robust_accuracy(points, eps)
    out = _out(args)
    out.write(f"{'eps':>8}  {'robust_acc':>10}\n")
    for e, a in zip(eps, acc):
        out.write(f"{e:8.4g}  {a:10.4f}\n")
    if out is not sys.stdout:
        out.close()
    return 0


def cmd_oracle(args):
    net, ds = _load(args)
    indices = parse_indices(args.indices, len(ds))
    attack = {}
    if args.records:
        attack = {p.index: p.norm for p in lio.read_records(args.records)[1]}
    out = _out(args)
    header = lio.RunHeader({"precision": args.precision}, lio.model_digest(args.model), indices, "oracle")
    out.write(header.to_json() + "\n")
    for i in indices:
        x = np.asarray(ds.images[i], dtype=np.float64)
        pred = int(classify_batch(net, x[None])[0])
        if pred != int(ds.labels[i]):
            rec = lio.PointRecord(i, int(ds.labels[i]), pred, 0.0, exact=0.0)
        else:
            ex = exact_min_perturbation(net, x)
            rec = lio.PointRecord(i, int(ds.labels[i]), pred, attack.get(i, ex.norm), exact=ex.norm)
            if i in attack:
                logger.info("point %d: attack/exact = %.6f", i, attack[i] / ex.norm)
        out.write(rec.to_json() + "\n")
    if out is not sys.stdout:
        out.close()
    return 0


def verify_region(net, x, n_samples=20, radius=1e-2, seed=0, max_tries=10_000):
    """Check that the network equals its region-affine surrogate near ``x``.

    Samples points around ``x``; those sharing the anchor pattern are
    compared against ``V z + v``, and for every sample the region
    membership test is compared with pattern equality.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=net.dtype).reshape(-1)
    logits, acts = forward(net, x)
    pat = pattern_of(acts)
    offs = affine_offsets(net, acts)
    sys_ = build_region(net, x, None, acts=acts)
    worst = float(np.abs(frozen_jvp(net, pat, x)[-1][0] + offs[-1] - logits).max())
    inside = agree = tried = 0
    r = radius
    while inside < n_samples and tried < max_tries:
        tried += 1
        g = rng.standard_normal(x.size)
        z = x + r * rng.random() * g / np.linalg.norm(g)
        same = pattern_at(net, z) == pat
        member = sys_.membership(z, 1e-6)[0]
        agree += same == member
        if same:
            inside += 1
            f, _ = forward(net, z)
            lin = frozen_jvp(net, pat, z)[-1][0] + offs[-1]
            worst = max(worst, float(np.abs(f - lin).max()))
        elif tried % 50 == 0:
            r *= 0.5
    return {"samples_in_region": inside, "samples_tried": tried, "max_discrepancy": worst,
            "membership_agreement": agree / tried if tried else 1.0}


def cmd_verify_region(args):
    net, ds = _load(args)
    rep = verify_region(net, ds.images[args.index], args.n_samples, args.radius, args.seed)
    rep["index"] = args.index
    out = _out(args)
    out.write(json.dumps(rep, indent=2) + "\n")
    if out is not sys.stdout:
        out.close()
    return 0


def cmd_sampler_stats(args):
    net, ds = _load(args)
    indices = parse_indices(args.indices, len(ds))
    train = args.train or args.data
    values = parse_floats(args.values)
    out = _out(args)
    checkpoints = None
    rows = {}
    for v in values:
        cfg = _attack_config(args)
        setattr(cfg, "q" if args.param == "q" else "gamma", v)
        cfg.__post_init__()
        traces = [t for _, t in run_attacks(args.model, args.data, train, indices, cfg,
                                            args.precision, args.workers) if t is not None]
        if not traces:
            raise ConfigError("no correctly classified points to attack")
        stats = trace_statistics(traces)
        if checkpoints is None:
            n = len(stats["median"]) - 1
            checkpoints = sorted(set([0] + [int(round(n * f / 10)) for f in range(1, 11)]))
        rows[v] = stats
    out.write(f"{args.param:>6} {'stat':>7} " + " ".join(f"{c:>9d}" for c in checkpoints) + "\n")
    for v, stats in rows.items():
        for name in ("median", "mean", "max"):
            vals = " ".join(f"{stats[name][c]:9.5f}" for c in checkpoints)
            out.write(f"{v:6g} {name:>7} {vals}\n")
    if out is not sys.stdout:
        out.close()
    return 0


# --------------------------------------------------------------------------
# parser


def _add_io(p, data=True):
    p.add_argument("--model", required=True, help="model manifest (JSON)")
    if data:
        p.add_argument("--data", required=True, help="dataset manifest (JSON)")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--out", help="output file (default: stdout)")


def _add_attack(p):
    p.add_argument("--train", help="training-set manifest for starting points (default: --data)")
    p.add_argument("--indices", default="all", help="a..b (half-open), comma list, or 'all'")
    p.add_argument("--n-regions", type=int, default=500)
    p.add_argument("--starts", type=int, default=5)
    p.add_argument("--q", type=float, default=0.8)
    p.add_argument("--gamma", type=float, default=6.0)
    p.add_argument("--kappa", type=float, default=10.0)
    p.add_argument("--qp-iters", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--policy", choices=POLICIES, default="nearest-margin")
    p.add_argument("--targeted", type=int, default=None, metavar="CLASS")
    p.add_argument("--workers", type=int, default=int(os.environ.get(WORKERS_ENV, "1")))


def build_parser():
    parser = argparse.ArgumentParser(prog="lrattack", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", parents=[common], help="minimal L2 adversarial perturbations")
    _add_io(p)
    _add_attack(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", parents=[common], help="robust accuracy from attack records")
    p.add_argument("--records", required=True)
    p.add_argument("--eps", default="0.5,1,1.5,2,2.5")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", parents=[common], help="exact minimal perturbations of tiny networks")
    _add_io(p)
    p.add_argument("--indices", default="all")
    p.add_argument("--records", help="attack records to compare against")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("verify-region", parents=[common], help="check region affineness around one input")
    _add_io(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--n-samples", type=int, default=20)
    p.add_argument("--radius", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_region)

    p = sub.add_parser("sampler-stats", parents=[common], help="norm-vs-regions statistics over q or gamma")
    _add_io(p)
    _add_attack(p)
    p.add_argument("--param", choices=("q", "gamma"), default="gamma")
    p.add_argument("--values", default="1,3,6,9")
    p.set_defaults(func=cmd_sampler_stats)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, KeyError) as e:
        print(f"lrattack: input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as e:
        print(f"lrattack: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
