"""JSON experiment configs: parsing, validation and object construction."""

from __future__ import annotations

import dataclasses
import json
import os
import time
from pathlib import Path

import numpy as np

from . import rng as _rng
from .conditioning import GuidanceConfig, make_operator, slerp
from .errors import FormatError
from .graph import (
    FACTOR,
    FactorGraph,
    NodeRef,
    bethe_coefficients,
    build_chain,
    build_cubemap,
    build_custom,
    build_cycle,
    build_grid,
    marginals_from_joint,
)
from .sampler import SamplerConfig
from .schedule import NoiseSchedule, karras_grid
from .scoremodel import DsmConfig, GaussianScoreModel, ScoreModel, load_checkpoint
from .testbeds import layout_covariance, random_markov_gaussian


class ConfigError(ValueError):
    """Malformed config, unresolved reference or missing file (exit code 2)."""


def _section(raw: dict, name: str, required: bool = False) -> dict:
    sec = raw.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"missing required section '{name}'")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section '{name}' must be an object")
    return sec


def _get(sec: dict, where: str, key: str, kind=float, default=dataclasses.MISSING):
    if key not in sec:
        if default is dataclasses.MISSING:
            raise ConfigError(f"{where}.{key}: required field missing")
        return default
    val = sec[key]
    try:
        if kind is int and (isinstance(val, bool) or float(val) != int(val)):
            raise TypeError
        return kind(val)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {val!r}") from None


@dataclasses.dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path
    seed: int = 0
    workers: int = 1
    out: Path | None = None

    @classmethod
    def load(cls, path, seed=None, workers=None, out=None) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(raw, path.parent, seed, workers, out)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".", seed=None, workers=None, out=None) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = cls(raw, Path(base_dir))
        cfg.seed = seed if seed is not None else _get(raw, "config", "seed", int, 0)
        env = os.environ.get("DC_WORKERS")
        if workers is not None:
            cfg.workers = workers
        elif env:
            try:
                cfg.workers = int(env)
            except ValueError:
                raise ConfigError(f"DC_WORKERS must be an integer, got {env!r}") from None
        else:
            cfg.workers = _get(raw, "config", "workers", int, 1)
        if cfg.workers < 1:
            raise ConfigError("workers must be >= 1")
        if out is not None:
            cfg.out = Path(out)
        elif "out" in raw:
            cfg.out = cfg.resolve(raw["out"])
        return cfg

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def section(self, name, required=False) -> dict:
        return _section(self.raw, name, required)

    # graph / schedule ----------------------------------------------------
    def graph(self) -> FactorGraph:
        sec = self.section("graph", required=True)
        kind = sec.get("kind")
        try:
            if kind == "chain":
                return build_chain(_get(sec, "graph", "num_factors", int), _get(sec, "graph", "factor_len", int),
                                   _get(sec, "graph", "overlap", int))
            if kind == "cycle":
                return build_cycle(_get(sec, "graph", "num_factors", int), _get(sec, "graph", "factor_len", int),
                                   _get(sec, "graph", "overlap", int))
            if kind == "grid":
                return build_grid(_get(sec, "graph", "rows", int), _get(sec, "graph", "cols", int),
                                  _get(sec, "graph", "patch", int), _get(sec, "graph", "overlap", int))
            if kind == "cubemap":
                return build_cubemap(_get(sec, "graph", "face_dim", int))
            if kind == "custom":
                return build_custom(_get(sec, "graph", "total_dim", int), sec.get("factors", []),
                                    sec.get("variables", []))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"graph: {exc}") from None
        raise ConfigError(f"graph.kind: unknown graph kind {kind!r}")

    def schedule(self) -> NoiseSchedule:
        sec = self.section("schedule")
        try:
            return NoiseSchedule(
                sec.get("kind", "linear-ve"),
                _get(sec, "schedule", "sigma_min", float, 0.002),
                _get(sec, "schedule", "sigma_max", float, 80.0),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from None

    # sampler / guidance ----------------------------------------------------
    def sampler(self, schedule: NoiseSchedule) -> SamplerConfig:
        sec = self.section("sampler")
        try:
            return SamplerConfig(
                grid=karras_grid(schedule, _get(sec, "sampler", "steps", int, 80), _get(sec, "sampler", "rho", float, 7.0)),
                eta=_get(sec, "sampler", "eta", float, 0.0),
                method=sec.get("method", "euler-ode"),
                seed=_get(sec, "sampler", "seed", int, self.seed),
                final_denoise=bool(sec.get("final_denoise", True)),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"sampler: {exc}") from None

    @property
    def sample_count(self) -> int:
        return _get(self.section("sampler"), "sampler", "count", int, 256)

    def guidance(self, sec: dict | None = None) -> GuidanceConfig:
        sec = self.section("conditioning") if sec is None else sec
        try:
            return GuidanceConfig(
                method=sec.get("method", "replacement"),
                lam=_get(sec, "conditioning", "lambda", float, 1.0),
                lambda_schedule=sec.get("lambda_schedule", "scaled"),
                gradient_mode=sec.get("gradient_mode", "auto"),
            )
        except ValueError as exc:
            raise ConfigError(f"conditioning: {exc}") from None

    def observation(self, dim: int):
        """(operator, y) for joint-level conditioning, or None."""
        sec = self.section("conditioning")
        if not sec or "operator" not in sec:
            return None
        try:
            op = make_operator(sec["operator"], dim)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"conditioning.operator: {exc}") from None
        if "observations" in sec:
            from .files import read_matrix_csv

            path = self.resolve(sec["observations"])
            if not path.exists():
                raise ConfigError(f"conditioning.observations: file not found: {path}")
            y = read_matrix_csv(path)
            y = y[0] if y.shape[0] == 1 else y
        elif "values" in sec:
            y = np.asarray(sec["values"], dtype=np.float64)
        else:
            raise ConfigError("conditioning: give 'observations' (CSV path) or 'values'")
        if y.shape[-1] != op.out_dim:
            raise ConfigError(f"conditioning: observation length {y.shape[-1]} != operator output {op.out_dim}")
        return op, y

    def dsm(self) -> DsmConfig:
        sec = self.section("train")
        try:
            return DsmConfig(
                iterations=_get(sec, "train", "iterations", int, 2000),
                batch_size=_get(sec, "train", "batch_size", int, 128),
                learning_rate=_get(sec, "train", "learning_rate", float, 1e-2),
                momentum=_get(sec, "train", "momentum", float, 0.9),
                rng_seed=self.seed,
                sigma_min=sec.get("sigma_min"),
                sigma_max=sec.get("sigma_max"),
                lr_decay=sec.get("lr_decay", "cosine"),
                clip_norm=sec.get("clip_norm", 10.0),
            )
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None

    # models ----------------------------------------------------------------
    def gaussian_joint(self, graph: FactorGraph):
        """(mean, cov) of the analytic joint for ou/gaussian/random-markov models, else None."""
        sec = self.section("models", required=True)
        kind = sec.get("kind")
        N = graph.layout.total_dim
        if kind == "ou":
            ell = _get(sec, "models", "length_scale", float, 5.0)
            var = _get(sec, "models", "variance", float, 1.0)
            return np.zeros(N), layout_covariance(graph.layout, ell, var)
        if kind == "gaussian":
            try:
                mean = np.asarray(sec["mean"], dtype=np.float64)
                cov = np.asarray(sec["covariance"], dtype=np.float64)
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"models: gaussian needs numeric 'mean' and 'covariance' ({exc})") from None
            if mean.shape != (N,) or cov.shape != (N, N):
                raise ConfigError(f"models: gaussian mean/covariance must have dimension {N}")
            return mean, cov
        if kind == "random-markov":
            gen = _rng.generator(self.seed, 0x6A55)
            return random_markov_gaussian(graph, gen, _get(sec, "models", "ridge", float, 0.5))
        return None

    def check_references(self, graph: FactorGraph) -> None:
        """Raise ConfigError for checkpoint paths that do not exist."""
        for path in self._checkpoint_paths(graph).values():
            if not path.exists():
                raise ConfigError(f"models: checkpoint not found: {path}")

    def _checkpoint_paths(self, graph: FactorGraph) -> dict:
        sec = self.section("models", required=True)
        kind = sec.get("kind")
        needed = [n for n in graph.nodes() if bethe_coefficients(graph).coeff(n) != 0]
        if kind == "shared":
            return {"shared": self.resolve(_get(sec, "models", "path", str))}
        if kind != "checkpoint":
            return {}
        paths = sec.get("paths")
        if paths is None:
            root = self.resolve(_get(sec, "models", "dir", str))
            return {n: root / checkpoint_name(n) for n in needed}
        if not isinstance(paths, dict):
            raise ConfigError("models.paths must map node ids to files")
        out = {}
        for n in needed:
            if str(n) not in paths:
                raise ConfigError(f"models.paths: no checkpoint for {n}")
            out[n] = self.resolve(paths[str(n)])
        return out

    def conditions(self, graph: FactorGraph) -> dict:
        sec = self.section("models", required=True)
        out = {}
        if "slerp" in sec:
            a = np.asarray(sec["slerp"]["a"], dtype=np.float64)
            b = np.asarray(sec["slerp"]["b"], dtype=np.float64)
            m = graph.num_factors
            for j in range(m):
                out[NodeRef(FACTOR, j)] = slerp(a, b, j / (m - 1) if m > 1 else 0.0)
            for node in graph.nodes():
                out.setdefault(node, np.zeros_like(a))
        for key, vec in sec.get("conditions", {}).items():
            try:
                out[NodeRef.parse(key)] = np.asarray(vec, dtype=np.float64)
            except ValueError as exc:
                raise ConfigError(f"models.conditions: {exc}") from None
        return out

    def bindings(self, graph: FactorGraph, schedule: NoiseSchedule):
        """NodeRef -> NodeBinding for every non-zero-coefficient node."""
        from .collage import NodeBinding

        sec = self.section("models", required=True)
        kind = sec.get("kind")
        coeffs = bethe_coefficients(graph)
        needed = [n for n in graph.nodes() if coeffs.coeff(n) != 0]
        conds = self.conditions(graph)
        joint = self.gaussian_joint(graph)
        if joint is not None:
            marg = marginals_from_joint(graph, *joint)
            models = {n: GaussianScoreModel(marg[n].mean, marg[n].covariance, schedule) for n in needed}
        elif kind in ("checkpoint", "shared"):
            self.check_references(graph)
            paths = self._checkpoint_paths(graph)
            if kind == "shared":
                shared = read_checkpoint(paths["shared"])
                models = {n: shared for n in needed}
            else:
                models = {n: read_checkpoint(paths[n]) for n in needed}
            for n, m in models.items():
                if graph.node_dim(n) not in m.widths:
                    raise ConfigError(f"models: checkpoint for {n} has widths {m.widths}, node needs {graph.node_dim(n)}")
        else:
            raise ConfigError(f"models.kind: unknown model kind {kind!r}")
        latency = _get(sec, "models", "latency_ms", float, 0.0)
        if latency > 0:
            models = {n: SlowScore(m, latency, sec.get("latency_mode", "sleep")) for n, m in models.items()}
        return {n: NodeBinding(n, models[n], conds.get(n)) for n in needed}

    def block_model(self, graph: FactorGraph, schedule: NoiseSchedule) -> ScoreModel:
        """Model for one factor window (AR / naive baselines on chains)."""
        sec = self.section("models", required=True)
        F = graph.node_dim(NodeRef(FACTOR, 0))
        if sec.get("kind") == "ou":
            from .testbeds import ou_covariance

            return GaussianScoreModel(np.zeros(F), ou_covariance(F, _get(sec, "models", "length_scale", float, 5.0),
                                                                 _get(sec, "models", "variance", float, 1.0)), schedule)
        return self.bindings(graph, schedule)[NodeRef(FACTOR, 0)].model


def checkpoint_name(node: NodeRef) -> str:
    return f"{node.kind}_{node.index}.dcsm"


def read_checkpoint(path: Path):
    try:
        return load_checkpoint(Path(path).read_bytes())
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


class SlowScore(ScoreModel):
    """Adds a fixed per-call cost to a model (latency benchmarks).

    ``sleep`` models an accelerator-bound call that releases the host;
    ``spin`` burns CPU for the duration.
    """

    def __init__(self, model: ScoreModel, cost_ms: float, mode: str = "sleep"):
        if mode not in ("sleep", "spin"):
            raise ConfigError(f"latency mode must be 'sleep' or 'spin', got {mode!r}")
        self.model = model
        self.schedule = model.schedule
        self.cost = cost_ms / 1000.0
        self.mode = mode

    @property
    def widths(self):
        return getattr(self.model, "widths", ())

    def _wait(self):
        if self.mode == "sleep":
            time.sleep(self.cost)
        else:
            end = time.perf_counter() + self.cost
            while time.perf_counter() < end:
                pass

    def score(self, u, sigma, condition=None):
        self._wait()
        return self.model.score(u, sigma, condition)

    @property
    def supports_vjp(self):
        return self.model.supports_vjp

    def vjp(self, u, t, v, condition=None):
        return self.model.vjp(u, t, v, condition)
