"""Mutation-only genetic search over detector training hyperparameters.

The objective is a black box returning (mAP@0.5, mAP@0.5:0.95); fitness is
their weighted sum and is maximized.
"""

from __future__ import annotations

import csv
import io
import logging
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .annotations import format_number

logger = logging.getLogger(__name__)

Evaluator = Callable[[Mapping[str, float]], Tuple[float, float]]

SELECTION_EPS = 1e-8
MAX_MUTATION_ATTEMPTS = 1000


class EvaluatorError(RuntimeError):
    """The external evaluator did not produce usable metrics."""


@dataclass(frozen=True)
class GeneSpec:
    name: str
    lower: float
    upper: float
    gain: float = 1.0
    initial: Optional[float] = None

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"gene {self.name}: lower {self.lower} > upper {self.upper}")
        if self.gain < 0:
            raise ValueError(f"gene {self.name}: gain must be >= 0")
        if self.initial is not None and not self.lower <= self.initial <= self.upper:
            raise ValueError(f"gene {self.name}: initial {self.initial} outside [{self.lower}, {self.upper}]")

    @property
    def frozen(self) -> bool:
        return self.gain == 0 or self.lower == self.upper

    def clamp(self, value: float) -> float:
        return min(max(value, self.lower), self.upper)


@dataclass(frozen=True)
class HyperparamSpace:
    genes: Tuple[GeneSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "genes", tuple(self.genes))
        names = [g.name for g in self.genes]
        if len(set(names)) != len(names):
            raise ValueError("gene names must be unique")

    @property
    def names(self) -> List[str]:
        return [g.name for g in self.genes]

    def initial_point(self) -> Dict[str, float]:
        """Initial values; genes without one start at the midpoint of their bounds."""
        return {g.name: g.initial if g.initial is not None else (g.lower + g.upper) / 2 for g in self.genes}

    def contains(self, values: Mapping[str, float]) -> bool:
        return all(g.lower <= values[g.name] <= g.upper for g in self.genes)


def parse_space(text: str) -> HyperparamSpace:
    """Read ``name lower upper gain initial`` lines; ``#`` starts a comment."""
    genes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (4, 5):
            raise ValueError(f"line {lineno}: expected 'name lower upper gain [initial]', got {line!r}")
        try:
            nums = [float(p) for p in parts[1:]]
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric field in {line!r}") from None
        try:
            genes.append(GeneSpec(parts[0], *nums))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return HyperparamSpace(tuple(genes))


def format_space(space: HyperparamSpace) -> str:
    lines = ["# name lower upper gain initial"]
    for g in space.genes:
        fields = [g.name, format_number(g.lower), format_number(g.upper), format_number(g.gain)]
        if g.initial is not None:
            fields.append(format_number(g.initial))
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def default_space() -> HyperparamSpace:
    """The 29 YOLOv5 genes, initialized at the published GA result."""
    text = resources.files("helmetkit").joinpath("data/default_space.txt").read_text()
    return parse_space(text)


@dataclass
class EvolutionConfig:
    generations: int = 200
    population_per_generation: int = 1
    parent_pool: int = 5
    mutation_probability: float = 0.8
    mutation_sigma: float = 0.2
    seed: int = 0
    fitness_weights: Tuple[float, float] = (0.1, 0.9)

    def __post_init__(self):
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if self.population_per_generation < 1 or self.parent_pool < 1:
            raise ValueError("population_per_generation and parent_pool must be >= 1")
        if not 0 < self.mutation_probability <= 1:
            raise ValueError("mutation_probability must lie in (0, 1]")
        if not self.mutation_sigma > 0:
            raise ValueError("mutation_sigma must be > 0")
        if abs(sum(self.fitness_weights) - 1.0) > 1e-12:
            raise ValueError("fitness weights must sum to 1")


@dataclass
class Candidate:
    values: Dict[str, float]
    generation: int = 0
    fitness: Optional[float] = None
    map50: Optional[float] = None
    map50_95: Optional[float] = None
    failed: bool = False
    error: str = ""


def fitness(map50: float, map5095: float, weights: Tuple[float, float] = (0.1, 0.9)) -> float:
    return weights[0] * map50 + weights[1] * map5095


@dataclass
class EvolutionLog:
    candidates: List[Candidate] = field(default_factory=list)

    def evaluated(self) -> List[Candidate]:
        return [c for c in self.candidates if c.fitness is not None]

    def best(self) -> Candidate:
        evaluated = self.evaluated()
        if not evaluated:
            raise ValueError("log has no evaluated candidates")
        # max keeps the first maximum, so the earliest candidate wins ties
        return max(evaluated, key=lambda c: c.fitness)

    def best_so_far(self) -> List[float]:
        """Best fitness after each generation."""
        out: List[float] = []
        best = -np.inf
        for gen in sorted({c.generation for c in self.candidates}):
            for c in self.candidates:
                if c.generation == gen and c.fitness is not None:
                    best = max(best, c.fitness)
            out.append(best)
        return out

    @property
    def last_generation(self) -> int:
        return max((c.generation for c in self.candidates), default=-1)


def select_parent(log: EvolutionLog, pool: int, rng: np.random.Generator) -> Candidate:
    """Fitness-weighted draw among the ``pool`` best evaluated candidates.

    Weights are ``fitness - min_pool_fitness + 1e-8``.
    """
    evaluated = log.evaluated()
    if not evaluated:
        raise ValueError("cannot select a parent from an empty log")
    ranked = sorted(evaluated, key=lambda c: -c.fitness)[: max(1, pool)]
    if len(ranked) == 1:
        return ranked[0]
    fit = np.array([c.fitness for c in ranked])
    weights = fit - fit.min() + SELECTION_EPS
    return ranked[int(rng.choice(len(ranked), p=weights / weights.sum()))]


def mutate(
    parent: Candidate,
    space: HyperparamSpace,
    prob: float = 0.8,
    sigma: float = 0.2,
    rng: Optional[np.random.Generator] = None,
    generation: Optional[int] = None,
) -> Candidate:
    """Multiplicative Gaussian mutation of each free gene with probability ``prob``.

    A mutated gene becomes ``clamp(value * (1 + gain * g), lower, upper)``
    with ``g ~ N(0, sigma)``. The whole draw is repeated until some gene
    actually changes. When no gene can change (all frozen) the parent values
    are returned as they are.

    Raises:
        RuntimeError: no change after 1000 redraws, e.g. when sigma is so
            small that every factor rounds to 1.
    """
    rng = rng if rng is not None else np.random.default_rng()
    free = [g for g in space.genes if not g.frozen]
    values = dict(parent.values)
    gen = parent.generation + 1 if generation is None else generation
    if not free:
        return Candidate(values, gen)
    old = np.array([values[g.name] for g in free])
    gain = np.array([g.gain for g in free])
    lower = np.array([g.lower for g in free])
    upper = np.array([g.upper for g in free])
    for _ in range(MAX_MUTATION_ATTEMPTS):
        hit = rng.random(len(free)) < prob
        noise = rng.normal(0.0, sigma, len(free))
        new = np.where(hit, np.clip(old * (1 + gain * noise), lower, upper), old)
        if np.any(new != old):
            for g, v in zip(free, new):
                values[g.name] = float(v)
            return Candidate(values, gen)
    raise RuntimeError(f"mutation produced no change in {MAX_MUTATION_ATTEMPTS} attempts")


def _evaluate(candidate: Candidate, evaluator: Evaluator, weights) -> Candidate:
    try:
        m50, m5095 = evaluator(dict(candidate.values))
        m50, m5095 = float(m50), float(m5095)
        if not (0.0 <= m50 <= 1.0 and 0.0 <= m5095 <= 1.0):
            raise EvaluatorError(f"metrics outside [0, 1]: map50={m50}, map50_95={m5095}")
    except Exception as exc:  # any evaluator failure scores 0 and the search goes on
        logger.warning("candidate in generation %d failed: %s", candidate.generation, exc)
        candidate.fitness, candidate.failed = 0.0, True
        candidate.error = f"{type(exc).__name__}: {exc}"
        return candidate
    candidate.map50, candidate.map50_95 = m50, m5095
    candidate.fitness = fitness(m50, m5095, weights)
    return candidate


def _complete_prefix(log: EvolutionLog, population: int) -> EvolutionLog:
    """Drop a trailing generation that did not finish evaluating."""
    kept = []
    for gen in sorted({c.generation for c in log.candidates}):
        members = [c for c in log.candidates if c.generation == gen]
        expected = 1 if gen == 0 else population
        if len(members) < expected or any(c.fitness is None for c in members):
            break
        kept.extend(members)
    return EvolutionLog(kept)


def evolve(
    space: HyperparamSpace,
    config: EvolutionConfig,
    evaluator: Evaluator,
    jobs: int = 1,
    log: Optional[EvolutionLog] = None,
    on_generation: Optional[Callable[[EvolutionLog], None]] = None,
) -> Tuple[Candidate, EvolutionLog]:
    """Run the search and return the best candidate and the full log.

    Generation 0 evaluates the space's initial point. Every later generation
    draws ``population_per_generation`` children from the log as it stood at
    the end of the previous generation, using a random stream seeded by
    ``(seed, generation)``; children are then evaluated, ``jobs`` at a time,
    and appended in draw order. Passing a partial ``log`` resumes after its
    last complete generation with the same result as an uninterrupted run.
    """
    log = _complete_prefix(log, config.population_per_generation) if log else EvolutionLog()
    if not log.candidates:
        first = Candidate(space.initial_point(), 0)
        log.candidates.append(_evaluate(first, evaluator, config.fitness_weights))
        if on_generation:
            on_generation(log)
    start = log.last_generation + 1
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for gen in range(start, config.generations + 1):
            rng = np.random.default_rng([config.seed & 0xFFFFFFFF, gen])
            children = []
            for _ in range(config.population_per_generation):
                parent = select_parent(log, config.parent_pool, rng)
                children.append(
                    mutate(parent, space, config.mutation_probability, config.mutation_sigma, rng, generation=gen)
                )
            if pool is not None:
                children = list(pool.map(lambda c: _evaluate(c, evaluator, config.fitness_weights), children))
            else:
                children = [_evaluate(c, evaluator, config.fitness_weights) for c in children]
            log.candidates.extend(children)
            if on_generation:
                on_generation(log)
    finally:
        if pool is not None:
            pool.shutdown()
    return log.best(), log


LOG_FIELDS = ("generation", "fitness", "map50", "map50_95", "failed", "error")


def _num(value: Optional[float]) -> str:
    return "" if value is None else format_number(value)


def format_log(log: EvolutionLog, space: HyperparamSpace) -> str:
    """CSV with one row per candidate; numbers round-trip exactly."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(LOG_FIELDS) + space.names)
    for c in log.candidates:
        writer.writerow(
            [c.generation, _num(c.fitness), _num(c.map50), _num(c.map50_95), int(c.failed), c.error]
            + [format_number(c.values[n]) for n in space.names]
        )
    return buf.getvalue()


def parse_log(text: str) -> EvolutionLog:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return EvolutionLog()
    if tuple(header[: len(LOG_FIELDS)]) != LOG_FIELDS:
        raise ValueError(f"unexpected log header {header}")
    names = header[len(LOG_FIELDS):]
    log = EvolutionLog()
    for row in reader:
        if not row:
            continue
        opt = lambda s: float(s) if s else None  # noqa: E731
        values = {n: float(v) for n, v in zip(names, row[len(LOG_FIELDS):])}
        log.candidates.append(
            Candidate(values, int(row[0]), opt(row[1]), opt(row[2]), opt(row[3]), row[4] == "1", row[5])
        )
    return log


@dataclass
class ScatterExport:
    tables: Dict[str, List[Tuple[float, float]]]  # gene -> (value, fitness) per evaluated candidate
    best: Dict[str, float]  # gene -> value in the single fittest candidate


def export_scatter(log: EvolutionLog) -> ScatterExport:
    evaluated = log.evaluated()
    if not evaluated:
        raise ValueError("log has no evaluated candidates")
    names = list(evaluated[0].values)
    tables = {n: [(c.values[n], c.fitness) for c in evaluated] for n in names}
    best = log.best()
    return ScatterExport(tables, {n: best.values[n] for n in names})


def format_scatter(scatter: ScatterExport) -> Tuple[str, str]:
    """``gene,value,fitness`` rows and the ``gene,best_value`` summary."""
    rows = ["gene,value,fitness"]
    for gene, pairs in scatter.tables.items():
        rows += [f"{gene},{format_number(v)},{format_number(f)}" for v, f in pairs]
    best = ["gene,best_value"] + [f"{g},{format_number(v)}" for g, v in scatter.best.items()]
    return "\n".join(rows) + "\n", "\n".join(best) + "\n"


def format_hyp(values: Mapping[str, float]) -> str:
    return "".join(f"{name}: {format_number(v)}\n" for name, v in values.items())


def parse_key_values(text: str) -> Dict[str, float]:
    """``name: value`` lines, as used by hyperparameter and metrics files."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"line {lineno}: expected 'name: value', got {line!r}")
        key, value = line.split(":", 1)
        try:
            out[key.strip()] = float(value)
        except ValueError:
            raise ValueError(f"line {lineno}: value for {key.strip()!r} is not a number") from None
    return out


def run_candidate(
    values: Mapping[str, float],
    command: str,
    workdir,
    timeout: Optional[float] = None,
) -> Tuple[float, float]:
    """Evaluate one candidate through an external command.

    The values go to ``<workdir>/hyp.txt`` as ``name: value`` lines. The
    command template may use ``{hyp}``, ``{workdir}`` and ``{metrics}``; it
    runs inside ``workdir`` and must leave ``map50: <v>`` and
    ``map50_95: <v>`` lines in ``<workdir>/metrics.txt``.

    Raises:
        EvaluatorError: nonzero exit, timeout, or a missing, unparseable or
            out-of-range metrics file.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    hyp, metrics = workdir / "hyp.txt", workdir / "metrics.txt"
    hyp.write_text(format_hyp(values))
    argv = shlex.split(
        command.format(hyp=shlex.quote(str(hyp)), workdir=shlex.quote(str(workdir)), metrics=shlex.quote(str(metrics)))
    )
    try:
        proc = subprocess.run(argv, cwd=workdir, capture_output=True, text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise EvaluatorError(f"evaluator command failed to run: {exc}") from exc
    if proc.returncode != 0:
        tail = proc.stderr.strip().splitlines()[-1:] or [""]
        raise EvaluatorError(f"evaluator exited with status {proc.returncode}: {tail[0]}")
    if not metrics.exists():
        raise EvaluatorError(f"evaluator wrote no metrics file {metrics}")
    try:
        parsed = parse_key_values(metrics.read_text())
        m50, m5095 = parsed["map50"], parsed["map50_95"]
    except (ValueError, KeyError) as exc:
        raise EvaluatorError(f"unparseable metrics file {metrics}: {exc}") from exc
    for name, v in (("map50", m50), ("map50_95", m5095)):
        if not 0.0 <= v <= 1.0:
            raise EvaluatorError(f"{name} = {v} outside [0, 1]")
    return m50, m5095


class CommandEvaluator:
    """Evaluator that runs :func:`run_candidate` in a fresh directory under ``root`` per call."""

    def __init__(self, command: str, root, timeout: Optional[float] = None):
        self.command = command
        self.root = Path(root)
        self.timeout = timeout

    def __call__(self, values: Mapping[str, float]) -> Tuple[float, float]:
        self.root.mkdir(parents=True, exist_ok=True)
        workdir = tempfile.mkdtemp(prefix="cand-", dir=self.root)
        return run_candidate(values, self.command, workdir, self.timeout)
