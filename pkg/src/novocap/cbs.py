"""Tag-constraint compilation and finite-state constrained beam search.

Constraints arrive as disjunctive groups of token ids ({desk, desks} means
either surface satisfies the group). The automaton state is a bitmask over
groups: consuming a member token sets that group's bit, bits are never
cleared, and the accepting state is the full mask, giving 2^n states for n
groups. The search keeps an independent beam per automaton state so that
low-probability constrained branches are not starved by unconstrained ones,
and finally ranks finished hypotheses in the accepting state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .captioner import step_logprobs
from .converter import BIAS_EXACT_MASK
from .errors import DataError, NumericError
from .features import ImageRecord
from .model import CaptionModel, assembled_tables
from .vocab import PLURAL, SINGULAR, Vocabulary, detokenize

DEFAULT_MAX_GROUPS = 3


@dataclass(frozen=True)
class ConstraintSet:
    groups: Tuple[frozenset, ...] = ()

    @property
    def n(self) -> int:
        return len(self.groups)

    def __post_init__(self):
        seen = set()
        for group in self.groups:
            if not group:
                raise DataError("constraint group must be nonempty")
            if seen & group:
                raise DataError("constraint groups must be pairwise disjoint")
            seen |= group


def build_constraints(
    tags: Sequence[Tuple[str, bool]],
    vocab: Vocabulary,
    max_groups: int = DEFAULT_MAX_GROUPS,
) -> ConstraintSet:
    """One group per tag: {singular} alone, or {singular, plural} when the
    image holds several instances. Groups keep the tag order and are capped
    at ``max_groups``."""
    groups = []
    for name, plural in tags[:max_groups]:
        sid = vocab.category_token_id(name, SINGULAR)
        pid = vocab.category_token_id(name, PLURAL)
        if sid is None or pid is None:
            raise DataError(
                f"tagged category {name!r} is not in the vocabulary; expand it first"
            )
        groups.append(frozenset({sid, pid}) if plural else frozenset({sid}))
    return ConstraintSet(tuple(groups))


class ConstraintAutomaton:
    """Bitmask FSM over constraint groups; transitions only ever set bits."""

    def __init__(self, constraints: ConstraintSet):
        self.constraints = constraints
        self.n = constraints.n
        self.num_states = 1 << self.n
        self.accepting = self.num_states - 1
        self._token_group: Dict[int, int] = {}
        for g, group in enumerate(constraints.groups):
            for token in group:
                self._token_group[int(token)] = g

    def transition(self, state: int, token: int) -> int:
        g = self._token_group.get(int(token))
        if g is None:
            return state
        return state | (1 << g)

    def fold(self, tokens: Sequence[int]) -> int:
        state = 0
        for t in tokens:
            state = self.transition(state, t)
        return state


@dataclass
class Hypothesis:
    tokens: Tuple[int, ...]
    logprob: float
    fsm_state: int
    rnn_state: np.ndarray
    finished: bool = False
    truncated: bool = False

    def rank_key(self):
        return (-self.logprob, self.tokens)


def satisfied_groups(tokens: Sequence[int], constraints: ConstraintSet) -> Tuple[int, ...]:
    toks = set(int(t) for t in tokens)
    return tuple(g for g, group in enumerate(constraints.groups) if toks & group)


def constrained_beam_search(
    model: CaptionModel,
    v_img: np.ndarray,
    constraints: Optional[ConstraintSet] = None,
    beam_size: int = 5,
    max_len: int = 20,
    tables=None,
) -> List[Hypothesis]:
    """Per-state beam search; returns finished hypotheses, best first.

    Every surviving hypothesis expands over the whole vocabulary (bos
    excluded) each step; expansions are re-bucketed by the automaton
    transition and each of the 2^n buckets keeps its top ``beam_size``
    unfinished hypotheses. Hypotheses finish on eos and are set aside without
    consuming beam slots. Under the exact-mask bias policy, constraint-group
    tokens whose probability is exactly zero are still expanded, scored with
    a finite surrogate (that step's minimum finite log-probability minus 1),
    so forced transitions stay comparable by likelihood.

    Ranking: finished hypotheses in the accepting state by log-probability
    (ties: lower token ids, shorter sequence). If none finished there, the
    highest-popcount state with a finished hypothesis is used instead. If
    nothing finished anywhere, the best unfinished hypothesis is returned
    flagged ``truncated``.
    """
    if beam_size < 1:
        raise DataError("beam_size must be >= 1")
    if max_len < 2:
        raise DataError("max_len must be >= 2")
    constraints = constraints or ConstraintSet()
    vocab = model.vocab
    if tables is None:
        tables = assembled_tables(model)
    V = len(vocab)
    for group in constraints.groups:
        for t in group:
            if not (0 <= t < V):
                raise DataError(f"constraint token {t} out of range")
            if t in (vocab.bos_id, vocab.eos_id):
                raise DataError("constraint groups cannot contain bos/eos")

    fsm = ConstraintAutomaton(constraints)
    exact_mask = model.config.bias_policy == BIAS_EXACT_MASK
    v_img = np.asarray(v_img, dtype=np.float64)
    if v_img.shape[0] != model.config.d_v:
        raise NumericError(
            f"image feature dimension {v_img.shape[0]} != model d_v {model.config.d_v}"
        )

    # token partition per state: members of pending groups move, the rest stay
    all_tokens = np.arange(V)
    member_arrays = [np.array(sorted(g), dtype=np.int64) for g in constraints.groups]
    stay_tokens: List[np.ndarray] = []
    moves: List[List[Tuple[int, int]]] = []  # per state: (dest, group index)
    for s in range(fsm.num_states):
        pending = [g for g in range(fsm.n) if not s & (1 << g)]
        pending_members = set()
        for g in pending:
            pending_members |= set(int(t) for t in member_arrays[g])
        keep = np.array(
            [t for t in all_tokens if t != vocab.bos_id and t not in pending_members],
            dtype=np.int64,
        )
        stay_tokens.append(keep)
        moves.append([(s | (1 << g), g) for g in pending])

    h0 = np.tanh(v_img @ model.params.W_init.T + model.params.b_init)
    start = Hypothesis(tokens=(vocab.bos_id,), logprob=0.0, fsm_state=0, rnn_state=h0)
    buckets: List[List[Hypothesis]] = [[] for _ in range(fsm.num_states)]
    buckets[0].append(start)
    finished: List[List[Hypothesis]] = [[] for _ in range(fsm.num_states)]

    for _ in range(max_len):
        live: List[Hypothesis] = []
        live_state: List[int] = []
        for s in range(fsm.num_states):
            for hyp in buckets[s]:
                live.append(hyp)
                live_state.append(s)
        if not live:
            break

        H_prev = np.stack([h.rnn_state for h in live])
        prev_tokens = np.array([h.tokens[-1] for h in live], dtype=np.int64)
        Vimg_rep = np.repeat(v_img[None, :], len(live), axis=0)
        logp, H_new = step_logprobs(model.params, tables, H_prev, prev_tokens, Vimg_rep)
        logp[:, vocab.bos_id] = -np.inf
        base = np.array([h.logprob for h in live])

        if exact_mask and fsm.n:
            finite_min = np.where(np.isfinite(logp), logp, np.inf).min(axis=1)

        # candidate pools per destination state
        pools: List[List[Tuple[np.ndarray, np.ndarray, np.ndarray]]] = [
            [] for _ in range(fsm.num_states)
        ]
        rows_by_state: Dict[int, List[int]] = {}
        for i, s in enumerate(live_state):
            rows_by_state.setdefault(s, []).append(i)
        for s, rows in rows_by_state.items():
            rows = np.array(rows, dtype=np.int64)
            keep = stay_tokens[s]
            if keep.size:
                scores = base[rows][:, None] + logp[np.ix_(rows, keep)]
                pools[s].append(
                    (
                        scores.ravel(),
                        np.repeat(rows, keep.size),
                        np.tile(keep, rows.size),
                    )
                )
            for dest, g in moves[s]:
                members = member_arrays[g]
                sub = logp[np.ix_(rows, members)]
                if exact_mask:
                    forced = finite_min[rows][:, None] - 1.0
                    sub = np.where(np.isneginf(sub), forced, sub)
                scores = base[rows][:, None] + sub
                pools[dest].append(
                    (
                        scores.ravel(),
                        np.repeat(rows, members.size),
                        np.tile(members, rows.size),
                    )
                )

        new_buckets: List[List[Hypothesis]] = [[] for _ in range(fsm.num_states)]
        for dest in range(fsm.num_states):
            if not pools[dest]:
                continue
            scores = np.concatenate([p[0] for p in pools[dest]])
            srcs = np.concatenate([p[1] for p in pools[dest]])
            toks = np.concatenate([p[2] for p in pools[dest]])
            ok = scores > -np.inf
            scores, srcs, toks = scores[ok], srcs[ok], toks[ok]
            if scores.size == 0:
                continue
            # eos expansions finish and are set aside; they never consume
            # beam slots, so constrained branches are not starved
            order = np.lexsort((srcs, toks, -scores))
            is_eos = toks[order] == vocab.eos_id

            def take(idx):
                src = live[int(srcs[idx])]
                tok = int(toks[idx])
                return Hypothesis(
                    tokens=src.tokens + (tok,),
                    logprob=float(scores[idx]),
                    fsm_state=dest,
                    rnn_state=H_new[int(srcs[idx])],
                    finished=tok == vocab.eos_id,
                )

            for j in order[is_eos][:beam_size]:
                finished[dest].append(take(j))
            new_buckets[dest] = [take(j) for j in order[~is_eos][:beam_size]]
            finished[dest] = sorted(finished[dest], key=Hypothesis.rank_key)[:beam_size]
        buckets = new_buckets

    if finished[fsm.accepting]:
        return sorted(finished[fsm.accepting], key=Hypothesis.rank_key)

    states_with_finished = [s for s in range(fsm.num_states) if finished[s]]
    if states_with_finished:
        best_pop = max(bin(s).count("1") for s in states_with_finished)
        pool = [
            hyp
            for s in states_with_finished
            if bin(s).count("1") == best_pop
            for hyp in finished[s]
        ]
        return sorted(pool, key=Hypothesis.rank_key)

    # nothing finished anywhere: surface the best open hypothesis, truncated
    for states in ([fsm.accepting], sorted(range(fsm.num_states), key=lambda s: (-bin(s).count("1"), s))):
        for s in states:
            if buckets[s]:
                best = min(buckets[s], key=Hypothesis.rank_key)
                return [replace(best, truncated=True)]
    raise NumericError("beam search produced no hypotheses")


def beam_search(model, v_img, beam_size: int = 5, max_len: int = 20, tables=None):
    """Plain beam search: the single-state degenerate case."""
    return constrained_beam_search(
        model, v_img, ConstraintSet(), beam_size=beam_size, max_len=max_len, tables=tables
    )


@dataclass
class CaptionResult:
    image_id: str
    text: str
    logprob: float
    tokens: Tuple[int, ...]
    satisfied: Tuple[int, ...]
    n_groups: int
    truncated: bool


def caption_image(
    model: CaptionModel,
    record: ImageRecord,
    beam_size: int = 5,
    max_len: int = 20,
    constraints_on: bool = True,
    article_fix: bool = False,
    max_groups: int = DEFAULT_MAX_GROUPS,
    tables=None,
) -> CaptionResult:
    """Decode one image: build tag constraints, search, render text."""
    constraints = (
        build_constraints(record.tags, model.vocab, max_groups=max_groups)
        if constraints_on
        else ConstraintSet()
    )
    hyps = constrained_beam_search(
        model,
        record.feature,
        constraints,
        beam_size=beam_size,
        max_len=max_len,
        tables=tables,
    )
    top = hyps[0]
    tokens = top.tokens if top.finished else top.tokens + (model.vocab.eos_id,)
    return CaptionResult(
        image_id=record.image_id,
        text=detokenize(tokens, model.vocab, article_fix=article_fix),
        logprob=top.logprob,
        tokens=top.tokens,
        satisfied=satisfied_groups(top.tokens, constraints),
        n_groups=constraints.n,
        truncated=top.truncated,
    )
