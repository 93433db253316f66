"""Consistency-ranking dataset: grids, sub-figure pairing, oracle ranking, pair conversion.

Every grid is rendered from a jittered copy of its prompt's identity, so grids
of one prompt disagree slightly with each other while cells inside a grid
share one identity.  Ranking instances pair one reference cell with the cells
of a different grid of the same prompt.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import toyworld as tw
from .numcore import RngStream, choice, gaussian

N_CANDIDATES = 4

# decoder vocabulary shared with the scorer
YES, NO = 0, 1
RATIONALE_BASE = 2
N_RATIONALE = 16
END = RATIONALE_BASE + N_RATIONALE
VOCAB_SIZE = END + 1
# |feature difference| bin edges: [0, .05) -> 0, [.05, .2) -> 1, [.2, .5) -> 2, [.5, inf) -> 3
BIN_EDGES = (0.05, 0.2, 0.5)

CONSISTENT, INCONSISTENT = "consistent", "inconsistent"
POLICIES = ("extremes", "all")


class DataError(ValueError):
    """Malformed dataset record; carries the file line number when known."""

    def __init__(self, message: str, line: int | None = None, path=None):
        where = f"{path}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class CellRef:
    prompt_id: int
    grid_id: int
    cell: int

    def to_json(self) -> dict:
        return {"prompt_id": self.prompt_id, "grid_id": self.grid_id, "cell": self.cell}


@dataclass
class Grid:
    prompt_id: int
    grid_id: int
    seed: int
    stream_id: int
    rows: int
    cols: int
    content_indices: tuple[int, ...]
    subfigures: list[tw.Signal] = field(repr=False)

    def cell(self, c: int) -> tw.Signal:
        return self.subfigures[c]


@dataclass
class RankingInstance:
    instance_id: int
    reference: CellRef
    candidates: tuple[CellRef, ...]
    ref_signal: tw.Signal = field(repr=False)
    cand_signals: tuple[tw.Signal, ...] = field(repr=False)
    annotation: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.candidates) != N_CANDIDATES or len(self.cand_signals) != N_CANDIDATES:
            raise ValueError(f"a ranking instance has exactly {N_CANDIDATES} candidates")
        if any(c.prompt_id != self.reference.prompt_id for c in self.candidates):
            raise ValueError("reference and candidates must share a prompt")
        if any(c.grid_id == self.reference.grid_id for c in self.candidates):
            raise ValueError("candidates must come from a different grid than the reference")
        if self.annotation is not None and sorted(self.annotation) != list(range(N_CANDIDATES)):
            raise ValueError(f"annotation {self.annotation} is not a permutation")


@dataclass
class LabeledPair:
    pair_id: int
    instance_id: int
    reference: CellRef
    candidate: CellRef
    ref_signal: tw.Signal = field(repr=False)
    cand_signal: tw.Signal = field(repr=False)
    label: str
    rationale: tuple[int, ...] = ()
    source: str = "ranking-derived"

    def __post_init__(self):
        if self.label not in (CONSISTENT, INCONSISTENT):
            raise ValueError(f"label must be consistent/inconsistent, got {self.label!r}")

    @property
    def decision_token(self) -> int:
        return YES if self.label == CONSISTENT else NO


# ---------------------------------------------------------------- pipeline

def build_grids(prompts: Sequence[tw.PromptSpec], g: int, m: int, n: int, noise_scale: float, stream: RngStream,
                jitter: float = 0.1, d: int = 64) -> list[Grid]:
    """``g`` grids of m x n cells per prompt; grid b of prompt p draws from stream.split(p * g + b)."""
    if g < 2:
        raise ValueError("need at least 2 grids per prompt")
    if m * n < 2:
        raise ValueError("a grid needs at least 2 cells")
    grids = []
    for pid, prompt in enumerate(prompts):
        for b in range(g):
            gs = stream.split(pid * g + b)
            ident = np.asarray(prompt.identity) + jitter * gaussian(gs, prompt.k_id)
            cells = []
            idx = tuple(c % prompt.n_contents for c in range(m * n))
            for c in idx:
                x = tw.synthesize(ident, prompt.contents[c], prompt.style, d)
                if noise_scale:
                    x = x + noise_scale * gaussian(gs, d)
                cells.append(tw.Signal(x))
            grids.append(Grid(pid, pid * g + b, gs.seed, gs.stream_id, m, n, idx, cells))
    return grids


def subfigure_pairing(grids: Sequence[Grid], start_id: int = 0) -> list[RankingInstance]:
    """Every cell of every grid, as reference, against the cells of every other grid."""
    out = []
    for ref_grid in grids:
        if ref_grid.rows * ref_grid.cols != N_CANDIDATES:
            raise ValueError(f"sub-figure pairing needs {N_CANDIDATES} cells per grid, "
                             f"got {ref_grid.rows}x{ref_grid.cols}")
        if ref_grid.prompt_id != grids[0].prompt_id:
            raise ValueError("subfigure_pairing expects the grids of a single prompt")
        for c in range(N_CANDIDATES):
            ref = CellRef(ref_grid.prompt_id, ref_grid.grid_id, c)
            for other in grids:
                if other.grid_id == ref_grid.grid_id:
                    continue
                cands = tuple(CellRef(other.prompt_id, other.grid_id, k) for k in range(N_CANDIDATES))
                out.append(RankingInstance(start_id + len(out), ref, cands, ref_grid.cell(c),
                                           tuple(other.subfigures)))
    return out


def group_by_prompt(grids: Iterable[Grid]) -> list[list[Grid]]:
    groups: dict[int, list[Grid]] = {}
    for gr in grids:
        groups.setdefault(gr.prompt_id, []).append(gr)
    return [groups[k] for k in sorted(groups)]


def pair_all(grids: Sequence[Grid]) -> list[RankingInstance]:
    instances: list[RankingInstance] = []
    for group in group_by_prompt(grids):
        instances.extend(subfigure_pairing(group, start_id=len(instances)))
    return instances


def rank_by_scores(scores: Sequence[float]) -> tuple[int, ...]:
    """Indices best-to-worst; ties broken by ascending index."""
    return tuple(sorted(range(len(scores)), key=lambda i: (-scores[i], i)))


def oracle_annotate(instance: RankingInstance) -> RankingInstance:
    scores = [tw.true_consistency(instance.ref_signal, c) for c in instance.cand_signals]
    return replace(instance, annotation=rank_by_scores(scores))


def synth_rationale(ref: tw.Signal, cand: tw.Signal, k_id: int = tw.K_ID) -> tuple[int, ...]:
    """Per identity component: sign and magnitude bin of (candidate - reference), then END.

    Symbol index within the rationale block is 2*bin + (1 if negative); the
    zero bin is unsigned.  Symbols 8..15 are reserved and never emitted.
    """
    diff = tw.extract_identity(cand, k_id) - tw.extract_identity(ref, k_id)
    tokens = []
    for v in diff:
        b = int(np.searchsorted(BIN_EDGES, abs(v), side="right"))
        sym = 0 if b == 0 else 2 * b + (1 if v < 0 else 0)
        tokens.append(RATIONALE_BASE + sym)
    tokens.append(END)
    return tuple(tokens)


def rationale_symbol(name: str) -> int:
    """Token id for names like 'bin0', 'bin3+', 'bin1-'."""
    b = int(name[3])
    if b == 0:
        return RATIONALE_BASE
    return RATIONALE_BASE + 2 * b + (1 if name.endswith("-") else 0)


def ranking_to_pairs(instance: RankingInstance, policy: str = "extremes", start_id: int = 0,
                     rationale: bool = True) -> list[LabeledPair]:
    if policy not in POLICIES:
        raise ValueError(f"unknown pair policy {policy!r}; choose from {POLICIES}")
    if instance.annotation is None:
        raise ValueError(f"instance {instance.instance_id} is not annotated")
    rank = instance.annotation
    picks = [(rank[0], CONSISTENT), (rank[-1], INCONSISTENT)]
    if policy == "all":
        picks = [(rank[0], CONSISTENT), (rank[1], CONSISTENT), (rank[2], INCONSISTENT), (rank[3], INCONSISTENT)]
    out = []
    for cand, label in picks:
        c_sig = instance.cand_signals[cand]
        tokens = synth_rationale(instance.ref_signal, c_sig) if rationale else ()
        out.append(LabeledPair(start_id + len(out), instance.instance_id, instance.reference,
                               instance.candidates[cand], instance.ref_signal, c_sig, label, tokens))
    return out


def split_benchmark(instances: Sequence[RankingInstance], holdout: int, stream: RngStream
                    ) -> tuple[list[RankingInstance], list[RankingInstance]]:
    """Seeded uniform split; both parts keep the input order."""
    if not 0 <= holdout < len(instances):
        raise ValueError(f"holdout {holdout} must be smaller than {len(instances)} instances")
    chosen = set(int(i) for i in choice(stream, len(instances), holdout))
    train = [x for i, x in enumerate(instances) if i not in chosen]
    bench = [x for i, x in enumerate(instances) if i in chosen]
    return train, bench


def instance_count(P: int, g: int, m: int, n: int) -> int:
    return P * g * m * n * (g - 1)


@dataclass
class Dataset:
    prompts: list[tw.PromptSpec]
    grids: list[Grid]
    train: list[RankingInstance]
    benchmark: list[RankingInstance]
    pairs: list[LabeledPair]

    @property
    def instances(self) -> list[RankingInstance]:
        return sorted(self.train + self.benchmark, key=lambda x: x.instance_id)


def build_dataset(prompts: Sequence[tw.PromptSpec], stream: RngStream, g: int = 4, m: int = 2, n: int = 2,
                  noise_scale: float = 0.5, jitter: float = 0.1, holdout: int = 3136, d: int = 64,
                  policy: str = "extremes", rationale: bool = True,
                  injected: Sequence[LabeledPair] = ()) -> Dataset:
    """Grid synthesis -> pairing -> oracle ranking -> split -> pair conversion.

    Benchmark instances are split off before conversion and never produce pairs.
    ``injected`` pairs (externally verified, disabled by default) are appended as-is.
    """
    grids = build_grids(prompts, g, m, n, noise_scale, stream.split(1), jitter, d)
    instances = [oracle_annotate(x) for x in pair_all(grids)]
    holdout = min(holdout, len(instances) - 1)
    train, bench = split_benchmark(instances, holdout, stream.split(2))
    pairs: list[LabeledPair] = []
    for inst in train:
        pairs.extend(ranking_to_pairs(inst, policy, start_id=len(pairs), rationale=rationale))
    for extra in injected:
        pairs.append(replace(extra, pair_id=len(pairs), source="injected"))
    return Dataset(list(prompts), grids, train, bench, pairs)


# ---------------------------------------------------------------- JSONL persistence

def _dump_lines(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def _read_lines(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON ({exc.msg})", lineno, path) from exc


def write_dataset(out_dir, ds: Dataset, seed: int) -> dict[str, int]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tw.write_prompts(out / "prompts.jsonl", ds.prompts)
    _dump_lines(out / "grids.jsonl", (
        {"grid_id": gr.grid_id, "prompt_id": gr.prompt_id, "seed": gr.seed, "stream_id": gr.stream_id,
         "rows": gr.rows, "cols": gr.cols, "content_indices": list(gr.content_indices),
         "subfigures": [s.samples.tolist() for s in gr.subfigures]}
        for gr in ds.grids))
    split = {x.instance_id: "train" for x in ds.train} | {x.instance_id: "benchmark" for x in ds.benchmark}
    _dump_lines(out / "instances.jsonl", (
        {"instance_id": x.instance_id, "seed": seed, "split": split[x.instance_id],
         "reference": x.reference.to_json(), "candidates": [c.to_json() for c in x.candidates],
         "annotation": list(x.annotation) if x.annotation is not None else None}
        for x in ds.instances))
    _dump_lines(out / "pairs.jsonl", (
        {"pair_id": p.pair_id, "instance_id": p.instance_id, "seed": seed, "reference": p.reference.to_json(),
         "candidate": p.candidate.to_json(), "label": p.label, "rationale": list(p.rationale), "source": p.source}
        for p in ds.pairs))
    counts = {"prompts": len(ds.prompts), "grids": len(ds.grids), "instances": len(ds.train) + len(ds.benchmark),
              "train": len(ds.train), "benchmark": len(ds.benchmark), "pairs": len(ds.pairs)}
    _dump_lines(out / "split.jsonl", [{"seed": seed, **counts,
                                       "benchmark_ids": [x.instance_id for x in ds.benchmark]}])
    return counts


def _cellref(obj, lineno, path) -> CellRef:
    try:
        return CellRef(int(obj["prompt_id"]), int(obj["grid_id"]), int(obj["cell"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad cell reference {obj!r}", lineno, path) from exc


def read_grids(path) -> dict[int, Grid]:
    grids = {}
    for lineno, rec in _read_lines(path):
        try:
            cells = [tw.Signal(np.asarray(s, dtype=np.float64)) for s in rec["subfigures"]]
            grids[int(rec["grid_id"])] = Grid(int(rec["prompt_id"]), int(rec["grid_id"]), int(rec["seed"]),
                                              int(rec["stream_id"]), int(rec["rows"]), int(rec["cols"]),
                                              tuple(rec["content_indices"]), cells)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad grid record ({exc})", lineno, path) from exc
    return grids


def _resolve(grids: dict[int, Grid], ref: CellRef, lineno, path) -> tw.Signal:
    gr = grids.get(ref.grid_id)
    if gr is None or gr.prompt_id != ref.prompt_id or not 0 <= ref.cell < len(gr.subfigures):
        raise DataError(f"cell reference {ref} does not resolve to a stored grid cell", lineno, path)
    return gr.cell(ref.cell)


def read_instances(path, grids: dict[int, Grid], split: str | None = None) -> list[RankingInstance]:
    out = []
    for lineno, rec in _read_lines(path):
        if split is not None and rec.get("split") != split:
            continue
        try:
            ref = _cellref(rec["reference"], lineno, path)
            cands = tuple(_cellref(c, lineno, path) for c in rec["candidates"])
            ann = rec.get("annotation")
            out.append(RankingInstance(int(rec["instance_id"]), ref, cands, _resolve(grids, ref, lineno, path),
                                       tuple(_resolve(grids, c, lineno, path) for c in cands),
                                       tuple(ann) if ann is not None else None))
        except DataError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad instance record ({exc})", lineno, path) from exc
    return out


def read_pairs(path, grids: dict[int, Grid] | None = None) -> list[LabeledPair]:
    """Load pairs; grid signals are resolved from grids.jsonl next to the pairs file by default."""
    path = Path(path)
    if grids is None:
        grids = read_grids(path.parent / "grids.jsonl") if (path.parent / "grids.jsonl").exists() else None
        if grids is None and not path.exists():
            raise FileNotFoundError(f"no such file: {path}")
        if grids is None:
            raise DataError(f"no grids.jsonl next to {path} to resolve pair signals")
    out = []
    for lineno, rec in _read_lines(path):
        try:
            ref = _cellref(rec["reference"], lineno, path)
            cand = _cellref(rec["candidate"], lineno, path)
            out.append(LabeledPair(int(rec["pair_id"]), int(rec["instance_id"]), ref, cand,
                                   _resolve(grids, ref, lineno, path), _resolve(grids, cand, lineno, path),
                                   rec["label"], tuple(int(t) for t in rec.get("rationale", ())),
                                   rec.get("source", "ranking-derived")))
        except DataError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad pair record ({exc})", lineno, path) from exc
    return out


def dataset_files_exist(out_dir) -> bool:
    out = Path(out_dir)
    return out.exists() and any(os.scandir(out))
