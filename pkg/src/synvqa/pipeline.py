"""Data ingestion, synthetic task generation, training, and evaluation.

Everything downstream of the CLI lives here: the flat-file config, the
binary feature container, embedding tables, JSONL manifests, the synthetic
compositional task used for ablation studies, the optimizer loop, and
metric evaluation. All randomness flows from one seed through named
substreams, so identically seeded runs log identical bytes.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deptree import DependencyTree, Token, parse_conllu
from .fusion import (
    BlockParams,
    ContextParams,
    FeatureBundle,
    context_encode,
    init_block_params,
    init_context_params,
    stack_forward,
)
from .hypergraph import SyntacticHypergraph, build_hypergraph, subtree_gen
from .numcore import Tensor, tensor, zero_grads
from .qahead import (
    HeadParams,
    attention_pool,
    count_loss,
    count_output,
    count_predict,
    hinge_loss,
    init_head_params,
    mc_score,
    open_ended_logits,
    open_ended_loss,
    project_concat,
)

SEED_ENV_VAR = "SCAN_SEED"
FEATURE_MAGIC = b"SCNF"
FEATURE_VERSION = 1
MAX_FEATURE_CELLS = 2**31


class DataError(ValueError):
    """Raised for malformed inputs: files, manifests, configs."""


class TrainAbort(RuntimeError):
    """Raised when training hits a non-finite loss."""


# -- configuration -----------------------------------------------------------


@dataclass
class TrainConfig:
    """Every knob of a run; the documented config-file keys are the fields."""

    d_w: int = 300
    d_v: int = 2048
    d: int = 256
    d_o: int = 256
    l: int = 1
    ot_iters: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    optimizer: str = "sgd"
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 1e-4
    ot_mode: str = "ot"
    syntax_mode: str = "hypergraph"
    use_frames: bool = True
    use_clips: bool = True
    use_context: bool = False
    rescale_plan: bool = False
    task: str = "open_ended"
    n_answers: int = 0

    def validate(self) -> None:
        if self.l < 1:
            raise DataError("l must be >= 1")
        for name in ("d_w", "d_v", "d", "d_o"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.ot_mode not in ("ot", "dot"):
            raise DataError(f"unknown ot_mode {self.ot_mode!r}")
        if self.syntax_mode not in ("hypergraph", "word-level"):
            raise DataError(f"unknown syntax_mode {self.syntax_mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise DataError(f"unknown optimizer {self.optimizer!r}")
        if self.task not in ("open_ended", "count", "multiple_choice"):
            raise DataError(f"unknown task {self.task!r}")
        if not (self.use_frames or self.use_clips):
            raise DataError("need at least one of use_frames/use_clips")


def _coerce(name: str, raw: str, kind: type):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise DataError(f"config key {name}: expected boolean, got {raw!r}")
    try:
        return kind(raw.strip())
    except ValueError as exc:
        raise DataError(f"config key {name}: {exc}") from None


def parse_config_text(text: str) -> dict:
    """key=value lines; # comments and blanks ignored; keys must be known."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kinds = {"int": int, "float": float, "str": str, "bool": bool}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise DataError(f"config line {lineno}: expected key=value")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in types:
            raise DataError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw, kinds[str(types[key])])
    return out


def load_config(
    path: str | None = None,
    overrides: dict | None = None,
    env: dict | None = None,
) -> TrainConfig:
    """Defaults, then file, then explicit overrides, then the seed env var."""
    values: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    env = os.environ if env is None else env
    if SEED_ENV_VAR in env:
        values["seed"] = _coerce("seed", env[SEED_ENV_VAR], int)
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator derived from the run seed and a stream name."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


# -- file formats ------------------------------------------------------------


def write_features(path: str | Path, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    if a.ndim != 2:
        raise DataError("feature container holds a 2-d matrix")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<BII", FEATURE_VERSION, a.shape[0], a.shape[1]))
        fh.write(a.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read features {path}: {exc}") from None
    if blob[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature container")
    if len(blob) < 13:
        raise DataError(f"{path}: truncated feature container header")
    version, rows, cols = struct.unpack("<BII", blob[4:13])
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    if rows * cols > MAX_FEATURE_CELLS:
        raise DataError(f"{path}: dimension overflow ({rows}x{cols})")
    expect = 13 + rows * cols * 4
    if len(blob) != expect:
        raise DataError(
            f"{path}: payload is {len(blob) - 13} bytes, expected {rows * cols * 4}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=13, count=rows * cols)
    return data.reshape(rows, cols).astype(np.float64)


def write_embeddings(path: str | Path, table: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in table.items():
            fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def read_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read embeddings {path}: {exc}") from None
    table: dict[str, np.ndarray] = {}
    width = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split(" ")
        token = parts[0]
        if token in table:
            raise DataError(f"{path} line {lineno}: duplicate token {token!r}")
        try:
            vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        except ValueError:
            raise DataError(f"{path} line {lineno}: bad float") from None
        if width is None:
            width = vec.size
        elif vec.size != width:
            raise DataError(
                f"{path} line {lineno}: width {vec.size} != {width}"
            )
        if vec.size == 0:
            raise DataError(f"{path} line {lineno}: token without values")
        table[token] = vec
    return table


# -- dataset -----------------------------------------------------------------


@dataclass
class Example:
    """One model input; candidate trees are used by multiple choice only."""

    id: str
    tree: DependencyTree | None
    Q: np.ndarray | None
    F: np.ndarray | None
    M: np.ndarray | None
    task: str
    target: int | float | None = None
    candidates: list[tuple[DependencyTree, np.ndarray]] | None = None
    truth_index: int | None = None
    meta: dict | None = None
    _graph: SyntacticHypergraph | None = field(default=None, repr=False)
    _cand_graphs: list[SyntacticHypergraph] | None = field(default=None, repr=False)

    def graph(self) -> SyntacticHypergraph:
        if self._graph is None:
            self._graph = build_hypergraph(self.tree)
        return self._graph

    def candidate_graphs(self) -> list[SyntacticHypergraph]:
        if self._cand_graphs is None:
            self._cand_graphs = [build_hypergraph(t) for t, _ in self.candidates]
        return self._cand_graphs


def _embed_tree(
    tree: DependencyTree, table: dict[str, np.ndarray], where: str
) -> np.ndarray:
    rows = []
    for tok in tree.tokens:
        if tok.form not in table:
            raise DataError(f"{where}: embedding table lacks token {tok.form!r}")
        rows.append(table[tok.form])
    return np.vstack(rows)


def _single_tree(path: Path, where: str) -> DependencyTree:
    try:
        trees = parse_conllu(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"{where}: cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise DataError(f"{where}: {exc}") from None
    if len(trees) != 1:
        raise DataError(f"{where}: expected one sentence in {path}, got {len(trees)}")
    return trees[0]


def load_dataset(manifest_path: str | Path) -> list[Example]:
    """Read a JSONL manifest; all paths are relative to the manifest."""
    manifest_path = Path(manifest_path)
    try:
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from None
    base = manifest_path.parent
    emb_cache: dict[str, dict[str, np.ndarray]] = {}
    answer_cache: dict[str, dict[str, int]] = {}

    def embeddings_for(rel: str) -> dict[str, np.ndarray]:
        if rel not in emb_cache:
            emb_cache[rel] = read_embeddings(base / rel)
        return emb_cache[rel]

    examples: list[Example] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{manifest_path.name} line {lineno}"
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: bad JSON: {exc}") from None
        for key in ("id", "embeddings", "task"):
            if key not in row:
                raise DataError(f"{where}: missing field {key!r}")
        task = row["task"]
        if task not in ("open_ended", "count", "multiple_choice"):
            raise DataError(f"{where}: unknown task {task!r}")
        table = embeddings_for(row["embeddings"])
        F = read_features(base / row["frames"]) if row.get("frames") else None
        M = read_features(base / row["clips"]) if row.get("clips") else None
        if F is None and M is None:
            raise DataError(f"{where}: example has neither frames nor clips")
        if F is not None and M is not None and F.shape[1] != M.shape[1]:
            raise DataError(
                f"{where}: frame width {F.shape[1]} != clip width {M.shape[1]}"
            )
        if task == "multiple_choice":
            if "candidates" not in row or "truth_index" not in row:
                raise DataError(f"{where}: multiple_choice needs candidates and truth_index")
            cands = []
            for rel in row["candidates"]:
                t = _single_tree(base / rel, where)
                cands.append((t, _embed_tree(t, table, where)))
            truth = int(row["truth_index"])
            if not 0 <= truth < len(cands):
                raise DataError(f"{where}: truth_index {truth} out of range")
            examples.append(
                Example(
                    id=str(row["id"]), tree=None, Q=None, F=F, M=M, task=task,
                    candidates=cands, truth_index=truth,
                )
            )
            continue
        if "conllu" not in row:
            raise DataError(f"{where}: missing field 'conllu'")
        tree = _single_tree(base / row["conllu"], where)
        Q = _embed_tree(tree, table, where)
        target = row.get("target")
        if target is None:
            raise DataError(f"{where}: missing target")
        if task == "count":
            target = float(target)
        elif isinstance(target, str):
            rel = row.get("answers")
            if not rel:
                raise DataError(
                    f"{where}: string target {target!r} needs an 'answers' file"
                )
            if rel not in answer_cache:
                try:
                    toks = (base / rel).read_text(encoding="utf-8").split()
                except OSError as exc:
                    raise DataError(f"{where}: cannot read answers: {exc}") from None
                answer_cache[rel] = {t: i for i, t in enumerate(toks)}
            vocab = answer_cache[rel]
            if target not in vocab:
                raise DataError(f"{where}: unknown answer token {target!r}")
            target = vocab[target]
        else:
            target = int(target)
        examples.append(
            Example(
                id=str(row["id"]), tree=tree, Q=Q, F=F, M=M, task=task, target=target
            )
        )
    return examples


# -- synthetic task ----------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Desk-scale compositional task over concept prototypes.

    Compositional videos hold two rival pairs of question words, each
    pair sharing a frame with a different answer-pool concept. The
    question is a dependency chain over all four words; its two deepest
    tokens form the only two-word composition in the chain's subtree
    set, and that pair's frame companion is the answer. As a bag of
    words the rival pairs are perfectly symmetric — every question word
    co-occurs with exactly one pool concept and one lean distractor —
    so only the tree says which pair composes, and with it which frame
    holds the answer. The lean two-concept distractors beat the
    three-concept pair frames on single-word cosine, so nearest-frame
    matching lands off the answer frame as well.
    """

    vocab_size: int = 16
    d_w: int = 16
    d_v: int = 16
    n_frames: int = 8
    arity: int = 2
    noise: float = 0.05
    n_train: int = 2000
    n_test: int = 500
    task: str = "open_ended"
    n_candidates: int = 4
    # companions come from a reserved tail of the vocabulary, the usual
    # fixed answer-vocabulary setup: question words and fillers never
    # overlap it, so being a plausible answer carries no information about
    # which frame holds it
    n_answers: int = 4
    # grounded word vectors share the concept prototypes (rotated into the
    # word width when the widths differ); ungrounded ones are independent
    # random draws, which makes the alignment much harder to learn
    grounded: bool = True

    def validate(self) -> None:
        if self.arity < 1:
            raise DataError("arity must be >= 1")
        if self.arity > 2:
            raise DataError("a frame holds at most three concepts, so arity caps at 2")
        if self.n_frames < 2:
            raise DataError("need at least two frames")
        if self.n_answers < 2:
            raise DataError("need an answer pool of >= 2 concepts")
        if self.arity == 1 or self.task == "count":
            # spread layout: answer frame plus one distractor per slot
            needed = self.arity + (self.n_frames - 1)
        else:
            # rival-pair layout: two colored pair frames, a lean
            # distractor per question word, leftover slots filler pairs
            n_tokens = 2 * self.arity
            if self.n_frames < 2 + n_tokens:
                raise DataError(
                    f"rival-pair layout needs >= {2 + n_tokens} frames"
                )
            extras = self.n_frames - (2 + n_tokens)
            needed = 2 * n_tokens + 2 * extras
        if self.vocab_size - self.n_answers < needed:
            raise DataError(
                f"vocab {self.vocab_size} too small: need >= {needed} object "
                f"concepts beyond the {self.n_answers} answers"
            )
        if self.d_v < self.vocab_size:
            raise DataError("d_v must be >= vocab_size for distinct prototypes")
        if self.task == "multiple_choice" and not (
            2 <= self.n_candidates <= self.n_answers
        ):
            raise DataError("candidate count must fit inside the answer pool")
        if self.task == "count" and self.n_frames > 10:
            raise DataError("count targets cap at 10, so n_frames must too")


def _chain_tree_over(tokens: list[str]) -> DependencyTree:
    return DependencyTree(
        tokens=tuple(
            Token(index=i + 1, form=t, head=i) for i, t in enumerate(tokens)
        )
    )


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    concepts: list[str]
    answers: list[str]
    prototypes: np.ndarray
    embeddings: dict[str, np.ndarray]
    train: list[Example]
    test: list[Example]


def _featurize(
    rng: np.random.Generator, spec: SyntheticSpec, frames: list[set[int]],
    prototypes: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    feats = np.zeros((spec.n_frames, spec.d_v))
    for pos, members in enumerate(frames):
        for c in members:
            feats[pos] += prototypes[c]
        feats[pos] += spec.noise * rng.normal(size=spec.d_v)
    # unit-normalize: concept COUNT must not leak through feature norms,
    # otherwise the answer frame is findable without any composition
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    clips = (feats[::2] + feats[1::2]) / 2.0 if spec.n_frames % 2 == 0 else np.vstack(
        [(feats[:-1:2] + feats[1::2]) / 2.0, feats[-1:]]
    )
    clips /= np.linalg.norm(clips, axis=1, keepdims=True)
    return feats, clips


def _spread_video(
    rng: np.random.Generator, spec: SyntheticSpec, prototypes: np.ndarray
) -> tuple[list[int], list[set[int]], int, int, np.ndarray, np.ndarray]:
    """Answer frame plus simple distractors; used for counting and arity 1."""
    n_objects = spec.vocab_size - spec.n_answers
    picks = rng.choice(
        n_objects, size=spec.arity + (spec.n_frames - 1), replace=False
    )
    question = [int(c) for c in picks[: spec.arity]]
    companion = n_objects + int(rng.integers(0, spec.n_answers))
    fill_iter = iter(int(c) for c in picks[spec.arity :])
    frames: list[set[int]] = []
    answer_pos = int(rng.integers(0, spec.n_frames))
    for pos in range(spec.n_frames):
        if pos == answer_pos:
            frames.append(set(question) | {companion})
        elif len(question) == 1:
            # no co-occurrence to exploit at arity 1, so distractors hold a
            # bare filler and the lone question word pins the answer frame
            frames.append({next(fill_iter)})
        else:
            anchor = question[int(rng.integers(0, len(question)))]
            frames.append({anchor, next(fill_iter)})
    feats, clips = _featurize(rng, spec, frames, prototypes)
    return question, frames, answer_pos, companion, feats, clips


def _chain_video(
    rng: np.random.Generator, spec: SyntheticSpec, prototypes: np.ndarray
) -> tuple[list[int], list[set[int]], int, int, np.ndarray, np.ndarray]:
    """Two rival word pairs, colored differently; the chain picks one.

    The question is a 2*arity-token dependency chain, root first. Its
    deepest tokens are the only pair the chain contributes as a subtree;
    they share a frame with the answer concept. The shallow tokens share
    a rival frame with a different pool concept, and the two pairs are
    otherwise interchangeable: each word also gets one lean two-concept
    distractor, and nothing else separates the pairs. Stripped of the
    tree, the question is a four-word bag facing two equally good
    colored pair frames, so which color answers is a coin flip there;
    the chain's subtree set holds the deep pair and not the shallow one.
    """
    a = spec.arity
    n_tokens = 2 * a
    extras = spec.n_frames - (2 + n_tokens)
    n_objects = spec.vocab_size - spec.n_answers
    picks = rng.choice(n_objects, size=2 * n_tokens + 2 * extras, replace=False)
    comps = rng.choice(spec.n_answers, size=2, replace=False)
    it = iter(int(c) for c in picks)
    shallow = [next(it) for _ in range(a)]
    deep = [next(it) for _ in range(a)]
    companion = n_objects + int(comps[0])
    rival = n_objects + int(comps[1])
    frames = [set(deep) | {companion}, set(shallow) | {rival}]
    for w in shallow + deep:
        frames.append({w, next(it)})
    for _ in range(extras):
        frames.append({next(it), next(it)})
    rng.shuffle(shallow)
    rng.shuffle(deep)
    question = shallow + deep
    slots = rng.permutation(spec.n_frames)
    arranged: list[set[int]] = [set()] * spec.n_frames
    for i, s in enumerate(slots):
        arranged[int(s)] = frames[i]
    answer_pos = int(slots[0])
    feats, clips = _featurize(rng, spec, arranged, prototypes)
    return question, arranged, answer_pos, companion, feats, clips


def _make_video(
    rng: np.random.Generator, spec: SyntheticSpec, prototypes: np.ndarray
) -> tuple[list[int], list[set[int]], int, int, np.ndarray, np.ndarray]:
    """One video: question concepts, frame membership, answer frame/concept."""
    if spec.arity == 1 or spec.task == "count":
        return _spread_video(rng, spec, prototypes)
    return _chain_video(rng, spec, prototypes)


def synth_generate(spec: SyntheticSpec, seed: int) -> SyntheticData:
    """Build train/test splits in memory; deterministic in the seed."""
    spec.validate()
    rng_proto = substream(seed, "prototypes")
    rng_emb = substream(seed, "embeddings")
    concepts = [f"c{i}" for i in range(spec.vocab_size)]
    n_objects = spec.vocab_size - spec.n_answers
    answers = concepts[n_objects:]
    # orthonormal prototypes: distinct concepts are exactly uncorrelated
    raw = rng_proto.normal(size=(spec.d_v, spec.d_v))
    q, _ = np.linalg.qr(raw)
    prototypes = q[: spec.vocab_size]
    if spec.grounded:
        if spec.d_w == spec.d_v:
            word_vecs = prototypes.copy()
        elif spec.d_w > spec.d_v:
            # embed prototypes in the wider word space through a map with
            # orthonormal rows; pairwise inner products are preserved exactly
            basis, _ = np.linalg.qr(rng_emb.normal(size=(spec.d_w, spec.d_w)))
            word_vecs = prototypes @ basis[: spec.d_v]
        else:
            # project onto a random d_w-dim subspace; angles survive only
            # approximately but distinct concepts stay well separated
            basis, _ = np.linalg.qr(rng_emb.normal(size=(spec.d_v, spec.d_w)))
            word_vecs = prototypes @ basis
        embeddings = {c: word_vecs[i].copy() for i, c in enumerate(concepts)}
    else:
        embeddings = {
            c: rng_emb.normal(size=spec.d_w) / np.sqrt(spec.d_w) for c in concepts
        }

    def build_split(name: str, count: int) -> list[Example]:
        rng = substream(seed, f"split-{name}")
        out = []
        for i in range(count):
            question, frames, answer_pos, companion, feats, clips = _make_video(
                rng, spec, prototypes
            )
            tokens = [concepts[c] for c in question]
            ex_id = f"{name}-{i:05d}"
            meta = {
                "answer_pos": answer_pos,
                "frames": [sorted(members) for members in frames],
            }
            if spec.task == "count":
                # ask how many frames show the first question concept
                anchor = question[0]
                target = float(sum(anchor in members for members in frames))
                tree = _chain_tree_over(tokens[:1])
                out.append(
                    Example(
                        id=ex_id, tree=tree,
                        Q=np.vstack([embeddings[tokens[0]]]),
                        F=feats, M=clips, task="count", target=target, meta=meta,
                    )
                )
                continue
            if spec.task == "multiple_choice":
                # distractor options come from the same answer pool, so
                # candidate plausibility alone separates nothing
                wrong = [c for c in range(n_objects, spec.vocab_size) if c != companion]
                rng.shuffle(wrong)
                options = [companion] + wrong[: spec.n_candidates - 1]
                order = rng.permutation(spec.n_candidates)
                options = [options[j] for j in order]
                truth = options.index(companion)
                cands = []
                for opt in options:
                    cand_tokens = tokens + [concepts[opt]]
                    t = _chain_tree_over(cand_tokens)
                    cands.append((t, np.vstack([embeddings[w] for w in cand_tokens])))
                out.append(
                    Example(
                        id=ex_id, tree=None, Q=None, F=feats, M=clips,
                        task="multiple_choice", candidates=cands, truth_index=truth,
                        meta=meta,
                    )
                )
                continue
            tree = _chain_tree_over(tokens)
            out.append(
                Example(
                    id=ex_id, tree=tree,
                    Q=np.vstack([embeddings[w] for w in tokens]),
                    F=feats, M=clips, task="open_ended",
                    target=companion - n_objects, meta=meta,
                )
            )
        return out

    return SyntheticData(
        spec=spec,
        concepts=concepts,
        answers=answers,
        prototypes=prototypes,
        embeddings=embeddings,
        train=build_split("train", spec.n_train),
        test=build_split("test", spec.n_test),
    )


def word_level_nearest_frame_accuracy(
    data: SyntheticData, examples: list[Example] | None = None
) -> float:
    """How often the frame closest to any single question word is the answer.

    The baseline the generator must defeat: cosine similarity between one
    word's prototype and each frame feature, best frame wins.
    """
    hits = 0
    total = 0
    for ex in examples if examples is not None else data.test:
        if ex.task != "open_ended":
            raise DataError("baseline is defined for the open_ended task")
        question = [data.concepts.index(t.form) for t in ex.tree.tokens]
        best = -np.inf
        best_pos = 0
        for pos in range(ex.F.shape[0]):
            f = ex.F[pos]
            for c in question:
                sim = f @ data.prototypes[c] / (np.linalg.norm(f) + 1e-12)
                if sim > best:
                    best, best_pos = sim, pos
        hits += best_pos == ex.meta["answer_pos"]
        total += 1
    return hits / total


def composition_oracle_accuracy(
    data: SyntheticData, examples: list[Example] | None = None
) -> float:
    """Upper bound: match every tree composition's summed prototypes to the
    frames by cosine, take the best (composition, frame) pair, and read the
    companion concept out of that frame's residual."""
    examples = examples if examples is not None else data.test
    n_objects = len(data.concepts) - len(data.answers)
    hits = 0
    for ex in examples:
        question = [data.concepts.index(t.form) for t in ex.tree.tokens]
        frame_norms = np.linalg.norm(ex.F, axis=1) + 1e-12
        best_sim = -np.inf
        best_pos = 0
        best_combo = None
        for edge in subtree_gen(ex.tree):
            combo = data.prototypes[[question[i - 1] for i in edge]].sum(axis=0)
            sims = ex.F @ combo / (np.linalg.norm(combo) * frame_norms)
            pos = int(sims.argmax())
            if sims[pos] > best_sim:
                best_sim, best_pos, best_combo = float(sims[pos]), pos, combo
        residual = ex.F[best_pos] - best_combo
        pred = int((data.prototypes[n_objects:] @ residual).argmax())
        hits += pred == ex.target
    return hits / len(examples)


# -- model assembly ----------------------------------------------------------


@dataclass
class ModelParams:
    blocks: list[BlockParams]
    head: HeadParams
    context: ContextParams | None = None

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.context is not None:
            out.update({f"ctx.{k}": t for k, t in self.context.named().items()})
        for i, b in enumerate(self.blocks):
            out.update({f"b{i}.{k}": t for k, t in b.named().items()})
        out.update({f"head.{k}": t for k, t in self.head.named().items()})
        return out


def init_model(cfg: TrainConfig) -> ModelParams:
    rng = substream(cfg.seed, "init")
    blocks = [
        init_block_params(
            rng, cfg.d_w, cfg.d_v, cfg.d,
            use_frames=cfg.use_frames, use_clips=cfg.use_clips,
        )
        for _ in range(cfg.l)
    ]
    head = init_head_params(
        rng, cfg.d_w, cfg.d_v, cfg.d_o, cfg.task,
        n_answers=cfg.n_answers or None,
        use_frames=cfg.use_frames, use_clips=cfg.use_clips,
    )
    context = init_context_params(rng, cfg.d_w) if cfg.use_context else None
    return ModelParams(blocks=blocks, head=head, context=context)


def _pooled(
    model: ModelParams,
    cfg: TrainConfig,
    graph: SyntacticHypergraph,
    Q: np.ndarray,
    F: np.ndarray | None,
    M: np.ndarray | None,
) -> Tensor:
    Qt = tensor(Q)
    if model.context is not None:
        Qt = context_encode(Qt, model.context)
    bundle = FeatureBundle(
        Q=Qt,
        F=tensor(F) if (cfg.use_frames and F is not None) else None,
        M=tensor(M) if (cfg.use_clips and M is not None) else None,
    )
    out = stack_forward(
        bundle, graph, model.blocks,
        ot_mode=cfg.ot_mode, syntax_mode=cfg.syntax_mode,
        ot_iters=cfg.ot_iters, rescale_plan=cfg.rescale_plan,
    )
    Y = project_concat(out.Q, out.F, out.M, model.head)
    return attention_pool(Y, model.head.W_1o, model.head.W_2o)


def forward_example(model: ModelParams, cfg: TrainConfig, ex: Example):
    """Task-dependent output: logits, raw count, or candidate scores."""
    if ex.task == "multiple_choice":
        scores = []
        for (tree, Q), graph in zip(ex.candidates, ex.candidate_graphs()):
            y = _pooled(model, cfg, graph, Q, ex.F, ex.M)
            scores.append(mc_score(y, model.head))
        return scores
    y = _pooled(model, cfg, ex.graph(), ex.Q, ex.F, ex.M)
    if ex.task == "open_ended":
        return open_ended_logits(y, model.head)
    return count_output(y, model.head)


def example_loss(model: ModelParams, cfg: TrainConfig, ex: Example) -> Tensor:
    if ex.task == "open_ended":
        y = _pooled(model, cfg, ex.graph(), ex.Q, ex.F, ex.M)
        return open_ended_loss(y, int(ex.target), model.head)
    if ex.task == "count":
        y = _pooled(model, cfg, ex.graph(), ex.Q, ex.F, ex.M)
        return count_loss(y, float(ex.target), model.head)
    scores = forward_example(model, cfg, ex)
    return hinge_loss([scores], [ex.truth_index])


def predict_example(model: ModelParams, cfg: TrainConfig, ex: Example):
    out = forward_example(model, cfg, ex)
    if ex.task == "open_ended":
        return int(out.data.reshape(-1).argmax())
    if ex.task == "count":
        return count_predict(out.item())
    return int(np.argmax([s.item() for s in out]))


# -- optimizers ---------------------------------------------------------------


class _Sgd:
    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[k]
            v *= self.momentum
            v -= self.lr * p.grad
            p.data += v


class _Adam:
    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1**self.t)
            vhat = self.v[k] / (1 - self.beta2**self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg: TrainConfig, params: dict[str, Tensor]):
    if cfg.optimizer == "adam":
        return _Adam(params, cfg.lr)
    return _Sgd(params, cfg.lr, cfg.momentum)


# -- training and evaluation ---------------------------------------------------


def _check_dataset(cfg: TrainConfig, dataset: list[Example]) -> None:
    if not dataset:
        raise DataError("empty dataset")
    kinds = {ex.task for ex in dataset}
    if len(kinds) > 1:
        raise DataError(f"mixed task kinds in one dataset: {sorted(kinds)}")
    (kind,) = kinds
    if kind != cfg.task:
        raise DataError(f"config task {cfg.task!r} but dataset is {kind!r}")
    for ex in dataset:
        Qs = [ex.Q] if ex.Q is not None else [q for _, q in ex.candidates]
        for Q in Qs:
            if Q.shape[1] != cfg.d_w:
                raise DataError(
                    f"{ex.id}: embedding width {Q.shape[1]} != d_w {cfg.d_w}"
                )
        for name, feats, used in (("frames", ex.F, cfg.use_frames),
                                  ("clips", ex.M, cfg.use_clips)):
            if used and feats is None:
                raise DataError(f"{ex.id}: config uses {name} but example has none")
            if used and feats.shape[1] != cfg.d_v:
                raise DataError(
                    f"{ex.id}: {name} width {feats.shape[1]} != d_v {cfg.d_v}"
                )
    if cfg.task == "open_ended":
        hi = max(int(ex.target) for ex in dataset)
        if cfg.n_answers and hi >= cfg.n_answers:
            raise DataError(f"target {hi} outside answer vocabulary {cfg.n_answers}")


def infer_n_answers(dataset: list[Example]) -> int:
    return max(int(ex.target) for ex in dataset) + 1


def batch_loss(model: ModelParams, cfg: TrainConfig, batch: list[Example]) -> Tensor:
    total = None
    for ex in batch:
        term = example_loss(model, cfg, ex)
        total = term if total is None else total + term
    loss = total * (1.0 / len(batch))
    if cfg.task == "count" and cfg.weight_decay > 0:
        reg = None
        for p in model.named().values():
            term = (p * p).sum()
            reg = term if reg is None else reg + term
        loss = loss + cfg.weight_decay * reg
    return loss


def train(
    cfg: TrainConfig,
    dataset: list[Example],
    eval_dataset: list[Example] | None = None,
) -> tuple[ModelParams, TrainConfig, list[str]]:
    """Minimize the task loss; returns the model and the metric log lines.

    The log is the determinism contract: identical config and data must
    reproduce it byte for byte.
    """
    cfg.validate()
    if cfg.task == "open_ended" and not cfg.n_answers:
        cfg = dataclasses.replace(cfg, n_answers=infer_n_answers(dataset))
    _check_dataset(cfg, dataset)
    model = init_model(cfg)
    params = model.named()
    opt = make_optimizer(cfg, params)
    shuffle_rng = substream(cfg.seed, "shuffle")
    log: list[str] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(dataset))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(dataset), cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            zero_grads(params)
            norm = lambda: sum(float((p.data ** 2).sum()) for p in params.values())
            try:
                loss = batch_loss(model, cfg, batch)
            except ValueError as exc:
                # diverging parameters poison a forward kernel before the
                # loss itself can go non-finite
                raise TrainAbort(
                    f"forward pass failed at epoch {epoch} step {step}: {exc}; "
                    f"param norm {norm():.3e}"
                ) from None
            value = loss.item()
            if not np.isfinite(value):
                raise TrainAbort(
                    f"non-finite loss {value} at epoch {epoch} step {step}; "
                    f"param norm {norm():.3e}"
                )
            loss.backward()
            opt.step()
            epoch_loss += value
            n_batches += 1
            step += 1
        line = f"epoch={epoch} loss={epoch_loss / n_batches:.10f}"
        if eval_dataset is not None:
            metrics = evaluate(model, cfg, eval_dataset)
            key, val = next(iter(metrics.items()))
            line += f" {key}={val:.10f}"
        log.append(line)
    return model, cfg, log


def evaluate(model: ModelParams, cfg: TrainConfig, dataset: list[Example]) -> dict:
    """Accuracy for classification and ranking; mean squared error for count."""
    _check_dataset(cfg, dataset)
    if cfg.task == "count":
        se = 0.0
        for ex in dataset:
            pred = predict_example(model, cfg, ex)
            se += (pred - float(ex.target)) ** 2
        return {"mse": se / len(dataset)}
    hits = 0
    for ex in dataset:
        pred = predict_example(model, cfg, ex)
        truth = ex.truth_index if ex.task == "multiple_choice" else int(ex.target)
        hits += pred == truth
    return {"accuracy": hits / len(dataset)}


def mean_alignment_entropy(model: ModelParams, cfg: TrainConfig,
                           dataset: list[Example], limit: int = 64) -> float:
    """Mean row entropy of the first block's frame alignment over examples."""
    from .otalign import row_entropy
    from .fusion import hyperedge_repr, _alignment
    from .hypergraph import identity_hypergraph

    ents = []
    p = model.blocks[0]
    for ex in dataset[:limit]:
        graph = ex.graph() if ex.task != "multiple_choice" else ex.candidate_graphs()[0]
        Q = ex.Q if ex.Q is not None else ex.candidates[0][1]
        if cfg.syntax_mode == "word-level":
            graph = identity_hypergraph(graph.n_nodes)
        Qt = tensor(Q)
        if model.context is not None:
            Qt = context_encode(Qt, model.context)
        X = hyperedge_repr(graph, Qt, p.W)
        G = _alignment(X, tensor(ex.F), p.frame_proj, cfg.ot_mode,
                       cfg.ot_iters, cfg.rescale_plan)
        ents.append(row_entropy(G.data).mean())
    return float(np.mean(ents))


# -- persistence ---------------------------------------------------------------


def save_model(path: str | Path, model: ModelParams, cfg: TrainConfig) -> None:
    arrays = {k: p.data for k, p in model.named().items()}
    arrays["__config__"] = np.frombuffer(
        json.dumps(dataclasses.asdict(cfg)).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_model(path: str | Path) -> tuple[ModelParams, TrainConfig]:
    try:
        bundle = np.load(path)
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from None
    if "__config__" not in bundle:
        raise DataError(f"{path}: not a saved model")
    cfg = TrainConfig(**json.loads(bytes(bundle["__config__"]).decode()))
    model = init_model(cfg)
    named = model.named()
    for k, p in named.items():
        if k not in bundle:
            raise DataError(f"{path}: missing parameter {k}")
        if bundle[k].shape != p.data.shape:
            raise DataError(f"{path}: parameter {k} has shape {bundle[k].shape}")
        p.data[:] = bundle[k]
    return model, cfg
