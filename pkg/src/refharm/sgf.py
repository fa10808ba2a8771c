"""Attention kernel for reference-guided feature fusion.

Token matrices are plain 2-d float arrays, one row per patch token:
``e_f`` (foreground, F x d_e), ``e_b`` (background, B x d_e), ``e_r``
(reference, R x d_e; R may be 0), plus optional guidance rows ``c_f``,
``c_b``, ``c_r`` (d_c columns) taken from the content descriptors.

Three score variants share one shape: plain query/key attention over the
background, the same with reference tokens appended to the key side, and
the guided form whose queries and keys are channel-concatenated with the
guidance vectors. Scores are scaled by 1/sqrt(d_proj), softmaxed per row,
used to mix the value rows, and the mix is fused back into the foreground
tokens through an output projection.

Projection weights are generated by an integer formula, so any
reimplementation can reproduce them exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import GuidanceMisalignedError, ShapeMismatchError

WEIGHT_MULT_ROW = 2654435761
WEIGHT_MULT_COL = 40503
WEIGHT_MOD = 65536

MODES = ("vanilla", "extended", "sgf")


@dataclass(frozen=True)
class SgfDims:
    d_e: int
    d_c: int
    d_proj: int

    def __post_init__(self) -> None:
        if min(self.d_e, self.d_c, self.d_proj) <= 0:
            raise ValueError("all dims must be positive")


@dataclass
class ProjectionWeights:
    w_query: np.ndarray
    w_key: np.ndarray
    w_out: np.ndarray
    mode: str

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        for name in ("w_query", "w_key", "w_out"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2:
                raise ShapeMismatchError(f"{name} must be 2-d")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} must be finite")
            setattr(self, name, arr)
        if self.w_out.shape[0] != 2 * self.w_out.shape[1]:
            raise ShapeMismatchError(
                f"w_out must map 2*d_e -> d_e, got {self.w_out.shape}"
            )

    @property
    def d_proj(self) -> int:
        return self.w_query.shape[1]


@dataclass
class AttentionBundle:
    """scores = raw attention, weights = softmax rows, weighted = mixed
    value rows, modulated = fused foreground tokens."""

    scores: np.ndarray
    weights: np.ndarray
    weighted: np.ndarray
    modulated: np.ndarray


def weight_matrix(rows: int, cols: int, seed: int) -> np.ndarray:
    """Deterministic pseudo-random matrix from pure integer arithmetic.

    entry[i, j] = (((i*2654435761 + j*40503 + seed) mod 65536)/65536 - 0.5) * 0.2
    """
    if rows <= 0 or cols <= 0:
        raise ValueError("weight matrix dims must be positive")
    i = np.arange(rows, dtype=np.int64)[:, None]
    j = np.arange(cols, dtype=np.int64)[None, :]
    mixed = (i * WEIGHT_MULT_ROW + j * WEIGHT_MULT_COL + (seed % WEIGHT_MOD)) % WEIGHT_MOD
    return (mixed.astype(np.float64) / WEIGHT_MOD - 0.5) * 0.2


def init_weights(seed: int, dims: SgfDims, mode: str) -> ProjectionWeights:
    """Reproducible projection weights for the requested attention mode."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    d_in = dims.d_e + dims.d_c if mode == "sgf" else dims.d_e
    return ProjectionWeights(
        w_query=weight_matrix(d_in, dims.d_proj, seed),
        w_key=weight_matrix(d_in, dims.d_proj, seed),
        w_out=weight_matrix(2 * dims.d_e, dims.d_e, seed),
        mode=mode,
    )


def _as_tokens(x, name: str, dim: Optional[int] = None) -> np.ndarray:
    if x is None:
        if dim is None:
            raise ShapeMismatchError(f"{name} missing and its dim is unknown")
        return np.zeros((0, dim), dtype=np.float64)
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-d, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} must be finite")
    return a


def _scores(queries: np.ndarray, keys: np.ndarray, w: ProjectionWeights) -> np.ndarray:
    if queries.shape[1] != w.w_query.shape[0]:
        raise ShapeMismatchError(
            f"query dim {queries.shape[1]} vs w_query rows {w.w_query.shape[0]}"
        )
    if keys.shape[1] != w.w_key.shape[0]:
        raise ShapeMismatchError(
            f"key dim {keys.shape[1]} vs w_key rows {w.w_key.shape[0]}"
        )
    if w.w_query.shape[1] != w.w_key.shape[1]:
        raise ShapeMismatchError("w_query and w_key disagree on d_proj")
    return (queries @ w.w_query) @ (keys @ w.w_key).T / np.sqrt(w.d_proj)


def attention_vanilla(e_f, e_b, w: ProjectionWeights) -> np.ndarray:
    """Scores of foreground queries against background keys, F x B."""
    e_f = _as_tokens(e_f, "e_f")
    e_b = _as_tokens(e_b, "e_b")
    if e_f.shape[1] != e_b.shape[1]:
        raise ShapeMismatchError("e_f and e_b disagree on d_e")
    return _scores(e_f, e_b, w)


def attention_extended(e_f, e_b, e_r, w: ProjectionWeights) -> np.ndarray:
    """Scores with reference tokens appended to the key side, F x (B+R)."""
    e_f = _as_tokens(e_f, "e_f")
    e_b = _as_tokens(e_b, "e_b")
    e_r = _as_tokens(e_r, "e_r", dim=e_b.shape[1])
    if e_b.shape[1] != e_r.shape[1] or e_f.shape[1] != e_b.shape[1]:
        raise ShapeMismatchError("token dims disagree")
    return _scores(e_f, np.concatenate([e_b, e_r], axis=0), w)


def attention_sgf(e_f, e_b, e_r, c_f, c_b, c_r, w: ProjectionWeights) -> np.ndarray:
    """Guided scores: queries and keys carry guidance channels, F x (B+R)."""
    e_f = _as_tokens(e_f, "e_f")
    e_b = _as_tokens(e_b, "e_b")
    e_r = _as_tokens(e_r, "e_r", dim=e_b.shape[1])
    c_f = _as_tokens(c_f, "c_f")
    c_b = _as_tokens(c_b, "c_b")
    c_r = _as_tokens(c_r, "c_r", dim=c_b.shape[1])
    if e_b.shape[1] != e_r.shape[1] or e_f.shape[1] != e_b.shape[1]:
        raise ShapeMismatchError("token dims disagree")
    d_c = c_f.shape[1]
    if c_b.shape[1] != d_c or c_r.shape[1] != d_c:
        raise ShapeMismatchError("guidance dims disagree")
    for tokens, guide, name in ((e_f, c_f, "c_f"), (e_b, c_b, "c_b"), (e_r, c_r, "c_r")):
        if tokens.shape[0] != guide.shape[0]:
            raise GuidanceMisalignedError(
                f"{name} holds {guide.shape[0]} rows for {tokens.shape[0]} tokens"
            )
    queries = np.concatenate([e_f, c_f], axis=1)
    keys = np.concatenate(
        [
            np.concatenate([e_b, e_r], axis=0),
            np.concatenate([c_b, c_r], axis=0),
        ],
        axis=1,
    )
    return _scores(queries, keys, w)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Numerically stable per-row softmax."""
    a = np.asarray(scores, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatchError("scores must be 2-d")
    if a.shape[1] == 0:
        raise ShapeMismatchError("softmax needs at least one column")
    if a.size and not np.isfinite(a).all():
        raise ValueError("scores must be finite")
    shifted = a - a.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def weighted_features(weights, e_b, e_r) -> np.ndarray:
    """Mix background and reference value rows by the attention weights."""
    weights = _as_tokens(weights, "weights")
    e_b = _as_tokens(e_b, "e_b")
    e_r = _as_tokens(e_r, "e_r", dim=e_b.shape[1])
    values = np.concatenate([e_b, e_r], axis=0)
    if weights.shape[1] != values.shape[0]:
        raise ShapeMismatchError(
            f"{weights.shape[1]} weight columns for {values.shape[0]} value rows"
        )
    return weights @ values


def modulate(e_f, e_w, w: ProjectionWeights) -> np.ndarray:
    """Fuse foreground tokens with the attention mix via w_out."""
    e_f = _as_tokens(e_f, "e_f")
    e_w = _as_tokens(e_w, "e_w")
    if e_f.shape != e_w.shape:
        raise ShapeMismatchError("e_f and e_w must share shape")
    stacked = np.concatenate([e_f, e_w], axis=1)
    if stacked.shape[1] != w.w_out.shape[0]:
        raise ShapeMismatchError(
            f"concatenated dim {stacked.shape[1]} vs w_out rows {w.w_out.shape[0]}"
        )
    return stacked @ w.w_out


def run_sgf(
    e_f,
    e_b,
    e_r=None,
    c_f=None,
    c_b=None,
    c_r=None,
    w: Optional[ProjectionWeights] = None,
) -> AttentionBundle:
    """Full pass: scores -> softmax -> value mix -> fused foreground tokens."""
    if w is None:
        raise ValueError("projection weights are required")
    if w.mode == "sgf":
        scores = attention_sgf(e_f, e_b, e_r, c_f, c_b, c_r, w)
    elif w.mode == "extended":
        scores = attention_extended(e_f, e_b, e_r, w)
    else:
        e_b_arr = _as_tokens(e_b, "e_b")
        e_r_arr = _as_tokens(e_r, "e_r", dim=e_b_arr.shape[1])
        if e_r_arr.shape[0] != 0:
            raise ShapeMismatchError("vanilla mode cannot take reference tokens")
        scores = attention_vanilla(e_f, e_b, w)
    weights = softmax_rows(scores)
    e_w = weighted_features(weights, e_b, e_r)
    e_f_prime = modulate(e_f, e_w, w)
    return AttentionBundle(
        scores=scores, weights=weights, weighted=e_w, modulated=e_f_prime
    )


# Fixed instance pinned by the self-check; the digest freezes the full
# numeric output so any drift in the kernel is caught immediately.
GOLDEN_CASE = {"d_e": 6, "d_c": 10, "d_proj": 8, "f": 5, "b": 4, "r": 3, "seed": 2024}
GOLDEN_DIGEST = "d7ba90535949cc065fdcfd364c5aa5fa9d7337520bf21985c1057346757fa1c7"


def golden_bundle() -> AttentionBundle:
    """Run the pinned self-check instance and return its full bundle."""
    from .util import seeded_generator

    case = GOLDEN_CASE
    rng = seeded_generator("sgf-golden", case["seed"])
    dims = SgfDims(d_e=case["d_e"], d_c=case["d_c"], d_proj=case["d_proj"])
    e_f = rng.standard_normal((case["f"], dims.d_e))
    e_b = rng.standard_normal((case["b"], dims.d_e))
    e_r = rng.standard_normal((case["r"], dims.d_e))
    c_f = rng.standard_normal((case["f"], dims.d_c))
    c_b = rng.standard_normal((case["b"], dims.d_c))
    c_r = rng.standard_normal((case["r"], dims.d_c))
    w = init_weights(case["seed"], dims, "sgf")
    return run_sgf(e_f, e_b, e_r, c_f, c_b, c_r, w)


def golden_digest() -> str:
    """Hex digest over the golden bundle, rounded to 1e-9 per entry."""
    import hashlib

    bundle = golden_bundle()
    h = hashlib.sha256()
    for arr in (bundle.scores, bundle.weights, bundle.weighted, bundle.modulated):
        h.update(np.round(np.asarray(arr, dtype=np.float64), 9).tobytes())
    return h.hexdigest()


def _weight_formula_check(rng) -> bool:
    rows = int(rng.integers(1, 40))
    cols = int(rng.integers(1, 40))
    seed = int(rng.integers(0, 2**31))
    mat = weight_matrix(rows, cols, seed)
    for _ in range(8):
        i = int(rng.integers(0, rows))
        j = int(rng.integers(0, cols))
        # Python big-int arithmetic, independent of the vectorized path.
        mixed = (i * WEIGHT_MULT_ROW + j * WEIGHT_MULT_COL + seed % WEIGHT_MOD) % WEIGHT_MOD
        want = (mixed / WEIGHT_MOD - 0.5) * 0.2
        if abs(mat[i, j] - want) > 1e-15:
            return False
    return True


def invariant_report(seed: int = 0, draws: int = 20) -> dict:
    """Run the structural self-checks on randomized instances.

    Checks, per draw: softmax rows form a distribution; permuting key
    tokens (with their guidance) leaves the mixed values unchanged;
    zeroed guidance channels collapse the guided scores onto the
    extended scores; an empty reference side collapses the extended
    scores onto the plain ones. A pinned instance digest guards against
    numeric drift, and the weight formula is re-derived with big-int
    arithmetic.
    """
    from .util import seeded_generator

    rng = seeded_generator("sgf-check", seed)
    failures: dict[str, int] = {}

    def record(name: str, ok: bool) -> None:
        if not ok:
            failures[name] = failures.get(name, 0) + 1

    for _ in range(draws):
        d_e = int(rng.integers(2, 12))
        d_c = int(rng.integers(2, 12))
        d_proj = int(rng.integers(2, 12))
        f = int(rng.integers(1, 12))
        b = int(rng.integers(1, 12))
        r = int(rng.integers(0, 12))
        w_seed = int(rng.integers(0, 2**31))
        dims = SgfDims(d_e=d_e, d_c=d_c, d_proj=d_proj)
        e_f = rng.standard_normal((f, d_e))
        e_b = rng.standard_normal((b, d_e))
        e_r = rng.standard_normal((r, d_e))
        c_f = rng.standard_normal((f, d_c))
        c_b = rng.standard_normal((b, d_c))
        c_r = rng.standard_normal((r, d_c))

        w_sgf = init_weights(w_seed, dims, "sgf")
        bundle = run_sgf(e_f, e_b, e_r, c_f, c_b, c_r, w_sgf)
        sums = bundle.weights.sum(axis=1)
        record(
            "softmax-distribution",
            bool(
                np.all(np.abs(sums - 1.0) < 1e-12)
                and np.all(bundle.weights >= 0.0)
                and np.all(bundle.weights <= 1.0)
            ),
        )

        perm = rng.permutation(b)
        shuffled = run_sgf(e_f, e_b[perm], e_r, c_f, c_b[perm], c_r, w_sgf)
        record(
            "key-permutation",
            bool(np.allclose(shuffled.weighted, bundle.weighted, atol=1e-12)),
        )

        w_ext = init_weights(w_seed, dims, "extended")
        guided_zero = attention_sgf(
            e_f,
            e_b,
            e_r,
            np.zeros((f, d_c)),
            np.zeros((b, d_c)),
            np.zeros((r, d_c)),
            w_sgf,
        )
        plain_ext = attention_extended(e_f, e_b, e_r, w_ext)
        record(
            "zero-guidance-collapse",
            bool(np.allclose(guided_zero, plain_ext, atol=1e-12)),
        )

        w_van = init_weights(w_seed, dims, "vanilla")
        no_ref = attention_extended(e_f, e_b, None, w_ext)
        plain = attention_vanilla(e_f, e_b, w_van)
        record("empty-reference-collapse", bool(np.allclose(no_ref, plain, atol=1e-12)))

    record("weight-formula", _weight_formula_check(rng))
    digest = golden_digest()
    if GOLDEN_DIGEST is not None:
        record("golden-digest", digest == GOLDEN_DIGEST)

    checks = sorted(
        {
            "softmax-distribution",
            "key-permutation",
            "zero-guidance-collapse",
            "empty-reference-collapse",
            "weight-formula",
        }
        | ({"golden-digest"} if GOLDEN_DIGEST is not None else set())
    )
    return {
        "passed": not failures,
        "draws": draws,
        "digest": digest,
        "checks": [
            {"name": name, "passed": name not in failures, "failures": failures.get(name, 0)}
            for name in checks
        ],
    }


def pool_grid(vectors: np.ndarray, from_shape: tuple[int, int], to_shape: tuple[int, int]) -> np.ndarray:
    """Average-pool row-major grid tokens from a finer grid to a coarser one."""
    vectors = _as_tokens(vectors, "vectors")
    fr, fc = from_shape
    tr, tc = to_shape
    if vectors.shape[0] != fr * fc:
        raise GuidanceMisalignedError(
            f"{vectors.shape[0]} rows do not form a {fr}x{fc} grid"
        )
    if fr % tr != 0 or fc % tc != 0:
        raise GuidanceMisalignedError(
            f"grid {fr}x{fc} does not pool evenly onto {tr}x{tc}"
        )
    br, bc = fr // tr, fc // tc
    d = vectors.shape[1]
    pooled = (
        vectors.reshape(tr, br, tc, bc, d).mean(axis=(1, 3)).reshape(tr * tc, d)
    )
    return pooled


def align_guidance(
    guidance: np.ndarray,
    guidance_shape: tuple[int, int],
    token_shape: tuple[int, int],
) -> np.ndarray:
    """Bring guidance rows onto the token grid by average pooling.

    The guidance grid must equal the token grid or be an integer multiple
    of it on both axes; anything else is an error, never a broadcast.
    """
    if guidance_shape == token_shape:
        return _as_tokens(guidance, "guidance")
    return pool_grid(guidance, guidance_shape, token_shape)
