"""Seeded generators for the synthetic classification tasks.

Each generator is a pure function of ``(n, L, seed)`` and returns a
:class:`Dataset` of fixed-length id sequences. Every task also ships an
oracle that recomputes the label from the token *strings* by a route that
shares no code with the generator, so generated labels can be audited.

Task readings (the multiclass ones are reductions of sequence-output tasks
to a single label):

* ``parity``: label is the number of ``1`` symbols mod 2.
* ``even_pairs``: label is 1 when the first and last symbols agree.
* ``missing_duplicates``: a string ``w w`` with one position hidden behind
  ``?``; label is the hidden bit.
* ``cycle_navigation``: moves ``+1``, ``-1``, ``=`` on a 5-cycle starting at
  0; label is the final position.
* ``stack_manipulation``: an initial stack over symbols ``0..3`` (bottom to
  top), a ``|`` separator, then ``POP`` / ``PUSHs`` actions; label is the
  top symbol afterwards, or 4 for an empty stack. POP on an empty stack is
  a no-op.
* ``modular_arithmetic``: a fully bracketed expression over digits ``0..4``
  with ``+ - *``; label is its value mod 5.
* ``solve_equation``: the same expressions with one digit replaced by ``x``
  followed by ``= c``; label is the unique ``x`` in Z5 solving it.
* ``listops``: prefix expressions ``[MIN``, ``[MAX``, ``[MED``, ``[SM`` over
  digits 0..9 closed by ``]``; MED takes the lower median and SM the sum
  mod 10. Label is the value.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "GenerationError",
    "TaskSpec",
    "Dataset",
    "TASKS",
    "generate",
    "make_splits",
    "oracle_label",
    "verify",
    "gen_listops",
    "gen_parity",
    "gen_even_pairs",
    "gen_missing_duplicates",
    "gen_cycle_navigation",
    "gen_stack_manipulation",
    "gen_modular_arithmetic",
    "gen_solve_equation",
    "save_dataset",
    "load_dataset",
    "save_vocab",
    "load_vocab",
]

PAD = "<pad>"
MOD = 5
MAX_RETRIES = 1000


class GenerationError(RuntimeError):
    """Constraints on an instance cannot be met."""


@dataclass(frozen=True)
class TaskSpec:
    name: str
    vocab: tuple[str, ...]  # id -> token string
    n_classes: int
    seq_len: int  # padded length
    seed: int = 0
    len_range: tuple[int, int] | None = None  # listops only

    @property
    def token_to_id(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.vocab)}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)


@dataclass
class Dataset:
    spec: TaskSpec
    tokens: np.ndarray  # (n, L) int64
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def strings(self, i: int) -> list[str]:
        return [self.spec.vocab[t] for t in self.tokens[i]]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.spec, self.tokens[idx], self.labels[idx])


def _encode(spec: TaskSpec, rows: list[list[str]], labels: list[int]) -> Dataset:
    ids = spec.token_to_id
    L = spec.seq_len
    tok = np.full((len(rows), L), ids.get(PAD, 0), dtype=np.int64)
    for r, row in enumerate(rows):
        if len(row) > L:
            raise GenerationError(f"instance of length {len(row)} exceeds L={L}")
        tok[r, : len(row)] = [ids[t] for t in row]
    return Dataset(spec, tok, np.asarray(labels, dtype=np.int64))


def _strip(tokens: list[str]) -> list[str]:
    return [t for t in tokens if t != PAD]


# ---------------------------------------------------------------- binary tasks

BITS = ("0", "1")


def gen_parity(n: int, L: int = 40, seed: int = 0) -> Dataset:
    if L < 1:
        raise ValueError("parity needs L >= 1")
    spec = TaskSpec("parity", BITS, 2, L, seed)
    x = np.random.default_rng(seed).integers(0, 2, size=(n, L))
    return Dataset(spec, x.astype(np.int64), (x.sum(axis=1) % 2).astype(np.int64))


def _oracle_parity(tokens: list[str]) -> int:
    return tokens.count("1") % 2


def gen_even_pairs(n: int, L: int = 40, seed: int = 0) -> Dataset:
    if L < 1:
        raise ValueError("even pairs needs L >= 1")
    spec = TaskSpec("even_pairs", BITS, 2, L, seed)
    x = np.random.default_rng(seed).integers(0, 2, size=(n, L))
    return Dataset(spec, x.astype(np.int64), (x[:, 0] == x[:, -1]).astype(np.int64))


def _oracle_even_pairs(tokens: list[str]) -> int:
    s = "".join(tokens)
    return int((s.count("01") + s.count("10")) % 2 == 0)


def gen_missing_duplicates(n: int, L: int = 40, seed: int = 0) -> Dataset:
    if L < 2 or L % 2:
        raise ValueError("missing duplicates needs an even L >= 2")
    spec = TaskSpec("missing_duplicates", BITS + ("?",), 2, L, seed)
    rng = np.random.default_rng(seed)
    half = L // 2
    w = rng.integers(0, 2, size=(n, half))
    pos = rng.integers(0, L, size=n)
    x = np.concatenate([w, w], axis=1)
    labels = w[np.arange(n), pos % half]
    x[np.arange(n), pos] = 2
    return Dataset(spec, x.astype(np.int64), labels.astype(np.int64))


def _oracle_missing_duplicates(tokens: list[str]) -> int:
    i = tokens.index("?")
    half = len(tokens) // 2
    return int(tokens[(i + half) % len(tokens)])


# ---------------------------------------------------------- cycle navigation

CYCLE_VOCAB = ("+1", "-1", "=")


def gen_cycle_navigation(n: int, L: int = 40, seed: int = 0) -> Dataset:
    spec = TaskSpec("cycle_navigation", CYCLE_VOCAB, MOD, L, seed)
    x = np.random.default_rng(seed).integers(0, 3, size=(n, L))
    steps = np.array([1, -1, 0])[x]
    return Dataset(spec, x.astype(np.int64), (steps.sum(axis=1) % MOD).astype(np.int64))


def _oracle_cycle_navigation(tokens: list[str]) -> int:
    pos = 0
    for t in tokens:
        pos = (pos + {"+1": 1, "-1": -1, "=": 0}[t]) % MOD
    return pos


# --------------------------------------------------------- stack manipulation

STACK_SYMBOLS = ("0", "1", "2", "3")
STACK_VOCAB = STACK_SYMBOLS + ("|", "POP") + tuple(f"PUSH{s}" for s in STACK_SYMBOLS)
EMPTY = len(STACK_SYMBOLS)


def gen_stack_manipulation(n: int, L: int = 40, seed: int = 0) -> Dataset:
    if L < 2:
        raise ValueError("stack manipulation needs L >= 2")
    spec = TaskSpec("stack_manipulation", STACK_VOCAB, len(STACK_SYMBOLS) + 1, L, seed)
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for _ in range(n):
        m = int(rng.integers(0, L // 2))
        stack = [int(s) for s in rng.integers(0, 4, size=m)]
        row = [STACK_SYMBOLS[s] for s in stack] + ["|"]
        for _ in range(L - m - 1):
            # half pops, half pushes spread over the symbols
            if rng.random() < 0.5:
                row.append("POP")
                if stack:
                    stack.pop()
            else:
                s = int(rng.integers(0, 4))
                row.append(f"PUSH{s}")
                stack.append(s)
        rows.append(row)
        labels.append(stack[-1] if stack else EMPTY)
    return _encode(spec, rows, labels)


def _oracle_stack_manipulation(tokens: list[str]) -> int:
    sep = tokens.index("|")
    stack = "".join(tokens[:sep])
    for t in tokens[sep + 1 :]:
        stack = stack[:-1] if t == "POP" else stack + t[len("PUSH") :]
    return int(stack[-1]) if stack else EMPTY


# ---------------------------------------------------- modular expressions

DIGITS5 = tuple(str(i) for i in range(MOD))
ARITH_VOCAB = (PAD,) + DIGITS5 + ("+", "-", "*", "(", ")")
EQUATION_VOCAB = ARITH_VOCAB + ("x", "=")
_OPS = {"+": lambda a, b: a + b, "-": lambda a, b: a - b, "*": lambda a, b: a * b}


def _random_tree(rng: np.random.Generator, n_leaves: int):
    """Random binary expression tree; leaves are ints, nodes ``(op, l, r)``."""
    if n_leaves == 1:
        return int(rng.integers(0, MOD))
    k = int(rng.integers(1, n_leaves))
    op = "+-*"[int(rng.integers(0, 3))]
    return (op, _random_tree(rng, k), _random_tree(rng, n_leaves - k))


def _tree_value(node, x: int | None = None) -> int:
    if isinstance(node, tuple):
        op, a, b = node
        return _OPS[op](_tree_value(a, x), _tree_value(b, x)) % MOD
    return x if node == "x" else node


def _tree_tokens(node, top: bool = True) -> list[str]:
    if not isinstance(node, tuple):
        return [str(node)]
    op, a, b = node
    inner = _tree_tokens(a, False) + [op] + _tree_tokens(b, False)
    return inner if top else ["("] + inner + [")"]


def _max_leaves(budget: int) -> int:
    # n leaves need 4n - 5 tokens (n >= 2): n digits, n-1 ops, 2(n-2) parens
    return max(1, (budget + 5) // 4)


def gen_modular_arithmetic(n: int, L: int = 40, seed: int = 0) -> Dataset:
    if L < 1:
        raise ValueError("modular arithmetic needs L >= 1")
    spec = TaskSpec("modular_arithmetic", ARITH_VOCAB, MOD, L, seed)
    rng = np.random.default_rng(seed)
    hi = _max_leaves(L)
    rows, labels = [], []
    for _ in range(n):
        tree = _random_tree(rng, int(rng.integers(1, hi + 1)))
        rows.append(_tree_tokens(tree))
        labels.append(_tree_value(tree))
    return _encode(spec, rows, labels)


def _replace_leaf(node, target: int, counter: list[int]):
    if isinstance(node, tuple):
        op, a, b = node
        return (op, _replace_leaf(a, target, counter), _replace_leaf(b, target, counter))
    counter[0] += 1
    return "x" if counter[0] - 1 == target else node


def _count_leaves(node) -> int:
    return _count_leaves(node[1]) + _count_leaves(node[2]) if isinstance(node, tuple) else 1


def gen_solve_equation(n: int, L: int = 40, seed: int = 0, max_retries: int = MAX_RETRIES) -> Dataset:
    if L < 3:
        raise ValueError("solve equation needs L >= 3")
    spec = TaskSpec("solve_equation", EQUATION_VOCAB, MOD, L, seed)
    rng = np.random.default_rng(seed)
    hi = _max_leaves(L - 2)
    rows, labels = [], []
    for _ in range(n):
        for _attempt in range(max_retries):
            tree = _random_tree(rng, int(rng.integers(1, hi + 1)))
            tree = _replace_leaf(tree, int(rng.integers(0, _count_leaves(tree))), [0])
            x = int(rng.integers(0, MOD))
            c = _tree_value(tree, x)
            # keep only equations with a unique solution
            if sum(_tree_value(tree, v) == c for v in range(MOD)) == 1:
                break
        else:
            raise GenerationError(f"no uniquely solvable equation after {max_retries} tries")
        rows.append(_tree_tokens(tree) + ["=", str(c)])
        labels.append(x)
    return _encode(spec, rows, labels)


class _InfixParser:
    """Recursive-descent evaluator for ``+ - *`` expressions mod 5."""

    def __init__(self, tokens: list[str], x: int | None = None):
        self.toks = tokens
        self.i = 0
        self.x = x

    def parse(self) -> int:
        v = self.expr()
        if self.i != len(self.toks):
            raise ValueError(f"trailing tokens at {self.i}")
        return v

    def expr(self) -> int:
        v = self.term()
        while self.i < len(self.toks) and self.toks[self.i] in "+-":
            op = self.toks[self.i]
            self.i += 1
            r = self.term()
            v = (v + r) % MOD if op == "+" else (v - r) % MOD
        return v

    def term(self) -> int:
        v = self.atom()
        while self.i < len(self.toks) and self.toks[self.i] == "*":
            self.i += 1
            v = (v * self.atom()) % MOD
        return v

    def atom(self) -> int:
        t = self.toks[self.i]
        self.i += 1
        if t == "(":
            v = self.expr()
            if self.toks[self.i] != ")":
                raise ValueError("unbalanced parentheses")
            self.i += 1
            return v
        return self.x if t == "x" else int(t)


def _oracle_modular_arithmetic(tokens: list[str]) -> int:
    return _InfixParser(_strip(tokens)).parse()


def _oracle_solve_equation(tokens: list[str]) -> int:
    toks = _strip(tokens)
    eq = toks.index("=")
    lhs, rhs = toks[:eq], int(toks[eq + 1])
    sols = [v for v in range(MOD) if _InfixParser(lhs, v).parse() == rhs]
    if len(sols) != 1:
        raise ValueError(f"equation has {len(sols)} solutions")
    return sols[0]


# ----------------------------------------------------------------- listops

LISTOPS_OPS = ("[MIN", "[MAX", "[MED", "[SM")
LISTOPS_VOCAB = (PAD,) + tuple(str(i) for i in range(10)) + LISTOPS_OPS + ("]",)
LISTOPS_MAX_DEPTH = 10
LISTOPS_MAX_ARITY = 5


def _listops_apply(op: str, args: list[int]) -> int:
    if op == "[MIN":
        return min(args)
    if op == "[MAX":
        return max(args)
    if op == "[MED":
        return sorted(args)[(len(args) - 1) // 2]
    return sum(args) % 10


def _listops_split(rng: np.random.Generator, inner: int) -> list[int]:
    """Split ``inner`` tokens among 2..5 children, each a digit (1) or >= 4."""
    for _ in range(20):
        arity = int(rng.integers(2, min(LISTOPS_MAX_ARITY, inner) + 1))
        cuts = sorted(int(c) for c in rng.integers(1, inner, size=arity - 1))
        sizes = [b - a for a, b in zip([0] + cuts, cuts + [inner])]
        if all(s == 1 or s >= 4 for s in sizes):
            return sizes
    if inner <= LISTOPS_MAX_ARITY:
        return [1] * inner
    return [1, inner - 1] if rng.random() < 0.5 else [inner - 1, 1]


def _listops_node(rng: np.random.Generator, budget: int, depth: int) -> tuple[list[str], int]:
    # an operator node needs at least "[OP d d ]", i.e. 4 tokens
    if budget < 4 or depth >= LISTOPS_MAX_DEPTH:
        d = int(rng.integers(0, 10))
        return [str(d)], d
    op = LISTOPS_OPS[int(rng.integers(0, 4))]
    toks, vals = [op], []
    for s in _listops_split(rng, budget - 2):
        t, v = _listops_node(rng, int(s), depth + 1)
        toks += t
        vals.append(v)
    return toks + ["]"], _listops_apply(op, vals)


def gen_listops(
    n: int, len_range: tuple[int, int] = (500, 600), seed: int = 0, max_retries: int = MAX_RETRIES
) -> Dataset:
    lo, hi = int(len_range[0]), int(len_range[1])
    if lo < 8 or hi < lo:
        raise GenerationError(f"infeasible ListOps length range {len_range}")
    spec = TaskSpec("listops", LISTOPS_VOCAB, 10, hi, seed, (lo, hi))
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for _ in range(n):
        for _attempt in range(max_retries):
            toks, v = _listops_node(rng, int(rng.integers(lo, hi + 1)), 0)
            if lo <= len(toks) <= hi:
                break
        else:
            raise GenerationError(f"no ListOps instance with length in {len_range} after {max_retries} tries")
        rows.append(toks)
        labels.append(v)
    return _encode(spec, rows, labels)


def _oracle_listops(tokens: list[str]) -> int:
    stack: list[list] = []
    result = None
    for t in _strip(tokens):
        if t.startswith("["):
            stack.append([t])
        elif t == "]":
            op, *args = stack.pop()
            v = _listops_apply(op, args)
            if stack:
                stack[-1].append(v)
            else:
                result = v
        elif stack:
            stack[-1].append(int(t))
        else:
            result = int(t)
    if stack or result is None:
        raise ValueError("malformed ListOps expression")
    return result


# ------------------------------------------------------------------ registry


@dataclass(frozen=True)
class _Task:
    generate: Callable[..., Dataset]
    oracle: Callable[[list[str]], int]


TASKS: dict[str, _Task] = {
    "listops": _Task(gen_listops, _oracle_listops),
    "parity": _Task(gen_parity, _oracle_parity),
    "even_pairs": _Task(gen_even_pairs, _oracle_even_pairs),
    "missing_duplicates": _Task(gen_missing_duplicates, _oracle_missing_duplicates),
    "cycle_navigation": _Task(gen_cycle_navigation, _oracle_cycle_navigation),
    "stack_manipulation": _Task(gen_stack_manipulation, _oracle_stack_manipulation),
    "modular_arithmetic": _Task(gen_modular_arithmetic, _oracle_modular_arithmetic),
    "solve_equation": _Task(gen_solve_equation, _oracle_solve_equation),
}


def generate(task: str, n: int, L: int | tuple[int, int] = 40, seed: int = 0) -> Dataset:
    """Dispatch by task name; ``L`` is a ``(min, max)`` range for listops."""
    if task not in TASKS:
        raise KeyError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
    if task == "listops" and isinstance(L, int):
        L = (max(8, L - L // 6), L)
    return TASKS[task].generate(n, L, seed)


def make_splits(task: str, n_train: int, n_holdout: int, L=40, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Train and holdout sets drawn from two independent seed streams."""
    train_seed, hold_seed = (
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2)
    )
    return generate(task, n_train, L, train_seed), generate(task, n_holdout, L, hold_seed)


def oracle_label(task: str, tokens: list[str]) -> int:
    return TASKS[task].oracle(list(tokens))


def verify(ds: Dataset) -> float:
    """Fraction of instances whose label agrees with the task oracle."""
    oracle = TASKS[ds.spec.name].oracle
    ok = sum(oracle(ds.strings(i)) == int(ds.labels[i]) for i in range(len(ds)))
    return ok / max(len(ds), 1)


# ------------------------------------------------------------------ persistence


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    for i in range(len(ds)):
        buf.write(f"{int(ds.labels[i])}\t{' '.join(ds.strings(i))}\n")
    path.write_text(buf.getvalue())
    return path


def load_dataset(path, spec: TaskSpec) -> Dataset:
    rows, labels = [], []
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        label, toks = line.split("\t", 1)
        labels.append(int(label))
        rows.append(toks.split(" "))
    return _encode(spec, rows, labels)


def save_vocab(spec: TaskSpec, path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{t}\t{i}\n" for i, t in enumerate(spec.vocab)))
    return path


def load_vocab(path) -> tuple[str, ...]:
    pairs = [line.split("\t") for line in Path(path).read_text().splitlines() if line]
    pairs.sort(key=lambda p: int(p[1]))
    return tuple(t for t, _ in pairs)
