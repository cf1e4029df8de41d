"""Command-line experiment runner.

    diffcollage {validate,train,sample,baseline,bench,eval} --config PATH [--out DIR] [--seed N] [--workers N]

Exit codes: 0 success, 1 validation failure, 2 config/IO error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import rng as _rng
from .collage import ComposedScore, composed_gaussian_oracle
from .conditioning import GuidedScore, autoregressive_outpaint, naive_concatenation
from .config import ConfigError, ExperimentConfig, SlowScore, checkpoint_name
from .errors import FormatError, NumericalError
from .evaluation import (
    drift_profile,
    fd_plus,
    fit_gaussian,
    reports_to_csv,
    seam_statistic,
)
from .files import read_matrix_csv, to_bytes_image, write_matrix_csv, write_pgm, write_ppm
from .graph import FACTOR, NodeRef, marginals_from_joint, validate
from .sampler import num_chunks, sample_batch
from .scoremodel import (
    Dataset,
    GaussianScoreModel,
    save_checkpoint,
    train_collage,
    train_shift_invariant,
)
from .testbeds import gaussian_draws, ou_covariance, ou_sample

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
EVAL_STREAM = 0xE7A1


class ValidationFailed(Exception):
    pass


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = cfg.out or Path("runs") / "default"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _valid_graph(cfg: ExperimentConfig):
    graph = cfg.graph()
    problems = validate(graph)
    if problems:
        for v in problems:
            print(f"INVALID {v}")
        raise ValidationFailed(f"{len(problems)} violation(s)")
    return graph


# --------------------------------------------------------------------------
# validate

def cmd_validate(cfg: ExperimentConfig) -> int:
    graph = cfg.graph()
    problems = validate(graph)
    if "models" in cfg.raw:
        cfg.check_references(graph)
    if problems:
        for v in problems:
            print(f"INVALID {v}")
        return EXIT_INVALID
    print(f"OK: {graph.num_factors} factors, {graph.num_variables} variables, "
          f"{graph.layout.total_dim} coordinates")
    return EXIT_OK


# --------------------------------------------------------------------------
# train

def _training_samples(cfg: ExperimentConfig, graph) -> np.ndarray:
    sec = cfg.section("train", required=True)
    data = sec.get("data", {"kind": "ou"})
    gen = _rng.generator(cfg.seed, 0xDA7A)
    kind = data.get("kind")
    count = int(data.get("count", 10000))
    N = graph.layout.total_dim
    if kind == "ou":
        if graph.layout.kind != "sequence":
            from .testbeds import layout_covariance

            cov = layout_covariance(graph.layout, float(data.get("length_scale", 5.0)), float(data.get("variance", 1.0)))
            return gaussian_draws(gen, count, np.zeros(N), cov)
        return ou_sample(gen, count, N, float(data.get("length_scale", 5.0)), float(data.get("variance", 1.0)))
    if kind == "csv":
        path = cfg.resolve(data.get("path", ""))
        if not path.exists():
            raise ConfigError(f"train.data.path: file not found: {path}")
        x = read_matrix_csv(path)
        if x.shape[1] != N:
            raise ConfigError(f"train.data: CSV rows have {x.shape[1]} values, graph has {N} coordinates")
        return x
    raise ConfigError(f"train.data.kind: unknown data kind {kind!r}")


def cmd_train(cfg: ExperimentConfig) -> int:
    graph = _valid_graph(cfg)
    schedule = cfg.schedule()
    dsm = cfg.dsm()
    sec = cfg.section("train", required=True)
    hidden = tuple(int(h) for h in sec.get("hidden", (64, 64)))
    out = _out_dir(cfg)
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    joint = _training_samples(cfg, graph)
    t0 = time.perf_counter()
    if sec.get("shared", False):
        F = graph.node_dim(NodeRef(FACTOR, 0))
        windows = [joint[:, list(graph.coords(NodeRef(FACTOR, j)))] for j in range(graph.num_factors)
                   if graph.node_dim(NodeRef(FACTOR, j)) == F]
        model = train_shift_invariant(Dataset(np.concatenate(windows)), hidden, dsm, schedule,
                                      crop_prob=float(sec.get("crop_prob", 0.5)))
        models = {"shared": model}
        (ckdir / "shared.dcsm").write_bytes(save_checkpoint(model))
    else:
        datasets = {n: Dataset(joint[:, list(graph.coords(n))]) for n in graph.nodes()}
        trained = train_collage(datasets, graph, hidden, dsm, schedule, workers=cfg.workers)
        models = {str(n): m for n, m in trained.items()}
        for n, m in trained.items():
            (ckdir / checkpoint_name(n)).write_bytes(save_checkpoint(m))
    elapsed = time.perf_counter() - t0
    names = list(models)
    losses = np.stack([models[k].training_log["loss"] for k in names], axis=1)
    rows = np.concatenate([np.arange(dsm.iterations)[:, None], losses], axis=1)
    write_matrix_csv(out / "loss.csv", rows, header=["iteration", *names])
    _write_json(out / "train.json", {
        "metrics": {"checkpoints": len(names), "nodes": names,
                    "final_loss": {k: float(models[k].training_log["loss"][-1]) for k in names}},
        "wall_clock": {"train_seconds": elapsed},
    })
    print(f"trained {len(names)} model(s) -> {ckdir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# sample

def _sampling_plan(cfg, count, chunk_size=256):
    """Parallelise over chunks when there are several, otherwise over nodes."""
    return (cfg.workers, 1) if num_chunks(count, chunk_size) > 1 else (1, cfg.workers)


def render_samples(out: Path, samples: np.ndarray, layout, prefix="sample") -> list[str]:
    written = []
    lo, hi = float(samples.min()), float(samples.max())
    if layout.kind in ("sequence", "ring", "flat"):
        strip = to_bytes_image(samples[:64], lo, hi)
        write_pgm(out / f"{prefix}_strip.pgm", np.repeat(strip, 4, axis=0))
        written.append(f"{prefix}_strip.pgm")
    elif layout.kind == "image":
        h, w = layout.shape
        for k in range(min(4, samples.shape[0])):
            img = np.zeros((h, w), dtype=np.uint8)
            vals = to_bytes_image(samples[k], lo, hi)
            if layout.pixels is not None:
                pix = np.asarray(layout.pixels)
                img[pix[:, 0], pix[:, 1]] = vals
            else:
                img = vals.reshape(h, w)
            write_pgm(out / f"{prefix}_{k}.pgm", img)
            written.append(f"{prefix}_{k}.pgm")
    elif layout.kind == "cubemap":
        from .graph import CUBE_FACES

        _, f, _ = layout.shape
        faces = to_bytes_image(samples[0], lo, hi).reshape(6, f, f)
        for name, face in zip(CUBE_FACES, faces):
            write_pgm(out / f"{prefix}_face_{name}.pgm", face)
            written.append(f"{prefix}_face_{name}.pgm")
        # horizontal cross: row 1 holds L F R B, U above F, D below F
        cross = np.zeros((3 * f, 4 * f, 3), dtype=np.uint8)
        cross[...] = (40, 40, 80)
        place = {"L": (1, 0), "F": (1, 1), "R": (1, 2), "B": (1, 3), "U": (0, 1), "D": (2, 1)}
        for name, face in zip(CUBE_FACES, faces):
            r, c = place[name]
            cross[r * f:(r + 1) * f, c * f:(c + 1) * f] = face[..., None]
        write_ppm(out / f"{prefix}_cross.ppm", cross)
        written.append(f"{prefix}_cross.ppm")
    return written


def moment_report(samples, graph, joint) -> dict:
    fit = fit_gaussian(samples)
    rep = {"empirical_mean": fit.mean.tolist(), "empirical_cov": fit.covariance.tolist()}
    if joint is None:
        return rep
    mean, cov = joint
    rep["oracle_mean_max_abs_error"] = float(np.abs(fit.mean - mean).max())
    rep["oracle_cov_rel_frobenius"] = float(np.linalg.norm(fit.covariance - cov) / np.linalg.norm(cov))
    bethe = composed_gaussian_oracle(graph, marginals_from_joint(graph, mean, cov), 0.0)
    rep["bethe_proper"] = bethe.proper
    if bethe.proper:
        rep["bethe_cov_rel_frobenius"] = float(
            np.linalg.norm(fit.covariance - bethe.covariance) / np.linalg.norm(bethe.covariance))
    return rep


def chain_boundaries(graph) -> list[int]:
    """Coordinates where factor windows start or end inside the content."""
    N = graph.layout.total_dim
    cuts = set()
    for f in graph.factors:
        if f[0] > 0:
            cuts.add(f[0])
        if f[-1] + 1 < N:
            cuts.add(f[-1] + 1)
    return sorted(cuts)


def compute_eval(cfg: ExperimentConfig, graph, samples: np.ndarray, joint) -> list:
    """FD+, seam and drift reports for 1D content; empty for other layouts."""
    if graph.layout.kind not in ("sequence", "ring"):
        return []
    sec = cfg.section("eval")
    F = graph.node_dim(NodeRef(FACTOR, 0))
    crop = int(sec.get("crop_len", F))
    gen = _rng.generator(cfg.seed, EVAL_STREAM)
    reports = []
    ref_path = sec.get("reference")
    if ref_path:
        path = cfg.resolve(ref_path)
        if not path.exists():
            raise ConfigError(f"eval.reference: file not found: {path}")
        reference = read_matrix_csv(path)
    elif joint is not None:
        mean, cov = joint[0][:crop], joint[1][:crop, :crop]
        reference = lambda count, g: gaussian_draws(g, count, mean, cov)  # noqa: E731
    else:
        reference = None
    if reference is not None:
        reports.append(fd_plus(samples, reference, crop, sec.get("count"), gen))
    bounds = chain_boundaries(graph)
    if bounds:
        reports.append(seam_statistic(samples, bounds))
    if graph.layout.kind == "sequence" and graph.num_factors >= 2:
        blocks = [samples[:, list(graph.coords(NodeRef(FACTOR, j)))] for j in range(graph.num_factors)]
        reports.extend(drift_profile(blocks))
    return reports


def cmd_sample(cfg: ExperimentConfig) -> int:
    graph = _valid_graph(cfg)
    schedule = cfg.schedule()
    scfg = cfg.sampler(schedule)
    count = cfg.sample_count
    N = graph.layout.total_dim
    out = _out_dir(cfg)
    batch_workers, node_workers = _sampling_plan(cfg, count)
    joint = cfg.gaussian_joint(graph)
    with ComposedScore(graph, cfg.bindings(graph, schedule), workers=node_workers) as cs:
        score_fn, project = cs, None
        obs = cfg.observation(N)
        if obs is not None:
            guided = GuidedScore(cs, obs[0], obs[1], cfg.guidance(), schedule)
            score_fn, project = guided, guided.projection()
        t0 = time.perf_counter()
        samples = sample_batch(score_fn, N, schedule, scfg, count, batch_workers, project=project)
        elapsed = time.perf_counter() - t0
        chunks = num_chunks(count)
        counters = {"score_rounds_per_path": cs.rounds // chunks,
                    "node_evaluations_per_path": cs.node_evaluations // chunks,
                    "steps": scfg.grid.steps, "method": scfg.method}
    write_matrix_csv(out / "samples.csv", samples)
    renders = render_samples(out, samples, graph.layout)
    samples = read_matrix_csv(out / "samples.csv")
    reports = compute_eval(cfg, graph, samples, joint)
    metrics = {"count": count, "dim": N, "counters": counters,
               "moments": moment_report(samples, graph, joint),
               "eval": [r.to_dict() for r in reports], "renders": renders}
    if obs is not None and obs[0].kind == "mask":
        metrics["observed_max_abs_error"] = float(np.abs(obs[0].apply(samples) - obs[1]).max())
    _write_json(out / "metrics.json", {"metrics": metrics, "wall_clock": {"sample_seconds": elapsed}})
    if reports:
        (out / "eval_metrics.csv").write_text(reports_to_csv(reports))
    print(f"wrote {count} samples of dim {N} -> {out / 'samples.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval

def cmd_eval(cfg: ExperimentConfig, crop_len: int | None = None) -> int:
    graph = _valid_graph(cfg)
    if crop_len is not None:
        cfg.raw.setdefault("eval", {})["crop_len"] = crop_len
    out = _out_dir(cfg)
    given = cfg.section("eval").get("samples")
    path = cfg.resolve(given) if given else out / "samples.csv"
    if not path.exists():
        raise ConfigError(f"eval: samples file not found: {path}")
    samples = read_matrix_csv(path)
    if samples.shape[1] != graph.layout.total_dim:
        raise FormatError(f"{path}: rows have {samples.shape[1]} values, graph has {graph.layout.total_dim}")
    reports = compute_eval(cfg, graph, samples, cfg.gaussian_joint(graph))
    (out / "eval_metrics.csv").write_text(reports_to_csv(reports))
    _write_json(out / "eval.json", {"metrics": {"eval": [r.to_dict() for r in reports]}})
    for r in reports:
        print(f"{r.name}\t{r.value!r}")
    return EXIT_OK


# --------------------------------------------------------------------------
# baseline

def cmd_baseline(cfg: ExperimentConfig) -> int:
    graph = _valid_graph(cfg)
    if graph.layout.kind != "sequence":
        raise ConfigError("baseline needs a chain graph")
    schedule = cfg.schedule()
    scfg = cfg.sampler(schedule)
    count = cfg.sample_count
    sec = cfg.section("baseline")
    L = graph.num_factors
    F = graph.node_dim(NodeRef(FACTOR, 0))
    S = graph.factors[1][0] if L > 1 else F
    V = F - S
    N = graph.layout.total_dim
    out = _out_dir(cfg)
    joint = cfg.gaussian_joint(graph)
    base = cfg.block_model(graph, schedule)
    crop = int(cfg.section("eval").get("crop_len", F))
    batch_workers, node_workers = _sampling_plan(cfg, count)
    if joint is not None:
        cov = joint[1][:crop, :crop]
        reference = lambda n, g: gaussian_draws(g, n, joint[0][:crop], cov)  # noqa: E731
    else:
        ref_cfg = dataclasses.replace(scfg, seed=_rng.derive_seed(scfg.seed, 0xEF))
        ref = sample_batch(base, F, schedule, ref_cfg, count, batch_workers)
        reference = ref[:, :crop]

    wall, runs, counters = {}, {}, {}
    t0 = time.perf_counter()
    with ComposedScore(graph, cfg.bindings(graph, schedule), workers=node_workers) as cs:
        runs["diffcollage"] = sample_batch(cs, N, schedule, scfg, count, batch_workers)
        counters["diffcollage_rounds_per_path"] = cs.rounds // num_chunks(count)
    wall["diffcollage_seconds"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    runs["naive"] = naive_concatenation(base, F, L, schedule, scfg, count, batch_workers)
    wall["naive_seconds"] = time.perf_counter() - t0

    ar_blocks = {}
    for method in sec.get("methods", ["replacement", "reconstruction"]):
        gcfg = cfg.guidance({**cfg.section("conditioning"), "method": method})
        t0 = time.perf_counter()
        res = autoregressive_outpaint(base, F, L, V, gcfg, schedule, scfg, count, batch_workers)
        wall[f"ar_{method}_seconds"] = time.perf_counter() - t0
        runs[f"ar_{method}"] = res.samples
        ar_blocks[f"ar_{method}"] = res.blocks
        counters[f"ar_{method}_sequential_calls"] = res.sequential_calls
        counters[f"ar_{method}_call_ratio"] = res.sequential_calls / counters["diffcollage_rounds_per_path"]

    reports = []
    seams = {"diffcollage": chain_boundaries(graph), "naive": [j * F for j in range(1, L)]}
    for name, x in runs.items():
        write_matrix_csv(out / f"samples_{name}.csv", x)
        gen = _rng.generator(cfg.seed, EVAL_STREAM)
        reports.append(fd_plus(x, reference, crop, None, gen, name=f"{name}.fd_plus"))
        bounds = seams.get(name, seams["diffcollage"])
        if bounds:
            reports.append(seam_statistic(x, bounds, name=f"{name}.seam_ratio"))
        if name in ar_blocks:
            blocks = ar_blocks[name]
        elif name == "naive":
            blocks = [x[:, j * F:(j + 1) * F] for j in range(L)]
        else:
            blocks = [x[:, list(graph.coords(NodeRef(FACTOR, j)))] for j in range(L)]
        if L >= 2:
            reports.extend(drift_profile(blocks, name=f"{name}.drift"))
    (out / "baseline_metrics.csv").write_text(reports_to_csv(reports))
    _write_json(out / "baseline.json", {
        "metrics": {"counters": counters, "reports": [r.to_dict() for r in reports],
                    "blocks": L, "block_len": F, "overlap": V, "count": count},
        "wall_clock": wall,
    })
    for r in reports:
        if not r.name.endswith(".block"):
            print(f"{r.name}\t{r.value:.6g}")
    for k, v in counters.items():
        print(f"{k}\t{v}")
    return EXIT_OK


# --------------------------------------------------------------------------
# bench

def bench_latency(lengths, worker_counts, cost_ms, mode="sleep", repeats=3, factor_len=8, overlap=4,
                  schedule=None, seed=0):
    """Time one composed-score evaluation per (chain length, workers).

    Returns rows (length, workers, mean_ms, speedup) and whether every
    worker count reproduced the serial output bit for bit.
    """
    from .schedule import NoiseSchedule
    from .graph import build_chain

    schedule = schedule or NoiseSchedule()
    rows, identical = [], True
    for length in lengths:
        graph = build_chain(length, factor_len, overlap)
        N = graph.layout.total_dim
        marg = marginals_from_joint(graph, np.zeros(N), ou_covariance(N, 5.0))
        models = {n: SlowScore(GaussianScoreModel(m.mean, m.covariance, schedule), cost_ms, mode)
                  for n, m in marg.items()}
        u = _rng.generator(seed, length).standard_normal(N)
        t = 0.5 * sum(schedule.domain)
        ref_out, ref_ms = None, None
        for w in worker_counts:
            with ComposedScore(graph, models, workers=w) as cs:
                cs(u, t)  # warm-up: starts the pool
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    val = cs(u, t)
                    times.append(time.perf_counter() - t0)
            ms = 1000.0 * float(np.mean(times))
            if ref_out is None:
                ref_out, ref_ms = val, ms
            identical &= bool(np.array_equal(val, ref_out))
            rows.append((length, w, ms, 1.0 if w == worker_counts[0] else ref_ms / ms))
    return rows, identical


def cmd_bench(cfg: ExperimentConfig) -> int:
    sec = cfg.section("bench")
    out = _out_dir(cfg)
    rows, identical = bench_latency(
        [int(x) for x in sec.get("lengths", [2, 4, 8, 16])],
        [int(x) for x in sec.get("workers", [1, 2, 4, 8])],
        float(sec.get("cost_ms", 5.0)),
        sec.get("mode", "sleep"),
        int(sec.get("repeats", 3)),
        int(sec.get("factor_len", 8)),
        int(sec.get("overlap", 4)),
        cfg.schedule(),
        cfg.seed,
    )
    with open(out / "latency.csv", "w") as fh:
        fh.write("length,workers,mean_ms,speedup\n")
        for length, w, ms, sp in rows:
            fh.write(f"{length},{w},{ms:.3f},{sp:.3f}\n")
    _write_json(out / "bench.json", {"metrics": {"outputs_identical": identical},
                                     "wall_clock": {"rows": [list(r) for r in rows]}})
    for length, w, ms, sp in rows:
        print(f"length={length}\tworkers={w}\t{ms:.2f} ms\tspeedup {sp:.2f}")
    return EXIT_OK


# --------------------------------------------------------------------------

COMMANDS = {
    "validate": cmd_validate,
    "train": cmd_train,
    "sample": cmd_sample,
    "baseline": cmd_baseline,
    "bench": cmd_bench,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment JSON file")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    common.add_argument("--seed", type=int, help="global seed (overrides config 'seed')")
    common.add_argument("--workers", type=int, help="worker threads (falls back to $DC_WORKERS, then config)")
    parser = argparse.ArgumentParser(prog="diffcollage", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "eval":
            p.add_argument("--crop-len", type=int, help="override eval.crop_len")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config, seed=args.seed, workers=args.workers, out=args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.crop_len)
        return COMMANDS[args.command](cfg)
    except ValidationFailed as exc:
        print(f"error: validation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
