"""Local feature-attribution explainers and repeated-explanation orchestration.

Two built-in explainers over any predict function:

* a perturbation-based local surrogate: sample a neighborhood from the
  training distribution, weight it by proximity, pick k features by
  forward selection and fit a weighted linear model;
* a Shapley-value explainer: exact coalition enumeration for narrow
  matrices, permutation sampling otherwise.

`model` may be a trained model from the model module or any callable
mapping an (n, d) block of rows to n prediction probabilities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .encoding import MatrixStats
from .errors import EmptyBackground, InvalidSpec, WidthMismatch
from .model import predict_proba_rows

SURROGATE_ID = "surrogate"
SHAPLEY_ID = "shapley"

_PREDICTION_SPREAD_TOL = 1e-12  # below this the neighborhood carries no signal
_EXACT_ROW_BUDGET = 262144  # composite rows per predict call in exact mode
_PERMUTATION_ROW_BUDGET = 8192  # composite rows per predict call in sampled mode


def _as_predict_fn(model):
    if callable(model) and not hasattr(model, "trees") and not hasattr(model, "weights"):
        return model
    return lambda rows: predict_proba_rows(model, rows)


@dataclass(frozen=True)
class Attribution:
    column_index: int
    weight: float
    interval: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        return {
            "column_index": self.column_index,
            "weight": self.weight,
            "interval": None if self.interval is None else
            {"lo": self.interval[0], "hi": self.interval[1]},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Attribution":
        iv = doc.get("interval")
        return cls(
            column_index=int(doc["column_index"]),
            weight=float(doc["weight"]),
            interval=None if iv is None else (float(iv["lo"]), float(iv["hi"])),
        )


@dataclass(frozen=True)
class Explanation:
    attributions: tuple[Attribution, ...]
    selected_k: int
    explainer_id: str
    seed_used: int
    n_features: int
    case_ref: tuple[str, int] | None = None
    degenerate: bool = False

    def __post_init__(self):
        cols = [a.column_index for a in self.attributions]
        if len(set(cols)) != len(cols):
            raise InvalidSpec("duplicate column indices in attribution list")
        if any(not (0 <= c < self.n_features) for c in cols):
            raise InvalidSpec("attribution column index outside [0, d)")

    def weight_vector(self) -> np.ndarray:
        w = np.zeros(self.n_features)
        for a in self.attributions:
            w[a.column_index] = a.weight
        return w

    def top_k(self, k: int) -> tuple[int, ...]:
        """Column indices of the k largest |weight| attributions; ties break
        toward the lower column index."""
        ranked = sorted(self.attributions, key=lambda a: (-abs(a.weight), a.column_index))
        return tuple(a.column_index for a in ranked[:k])

    def with_case_ref(self, case_id: str, prefix_length: int) -> "Explanation":
        return Explanation(self.attributions, self.selected_k, self.explainer_id,
                           self.seed_used, self.n_features,
                           case_ref=(case_id, prefix_length), degenerate=self.degenerate)

    def to_dict(self) -> dict:
        return {
            "attributions": [a.to_dict() for a in self.attributions],
            "selected_k": self.selected_k,
            "seed_used": self.seed_used,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class ExplanationSet:
    explanations: tuple[Explanation, ...]
    case_ref: tuple[str, int] | None = None

    def __post_init__(self):
        if len(self.explanations) < 2:
            raise InvalidSpec("stability evaluation needs at least 2 explanations")
        ids = {e.explainer_id for e in self.explanations}
        widths = {e.n_features for e in self.explanations}
        if len(ids) != 1 or len(widths) != 1:
            raise InvalidSpec("explanation set mixes explainers or feature widths")

    @property
    def m(self) -> int:
        return len(self.explanations)

    @property
    def explainer_id(self) -> str:
        return self.explanations[0].explainer_id

    @property
    def n_features(self) -> int:
        return self.explanations[0].n_features


@dataclass(frozen=True)
class SurrogateConfig:
    n_samples: int = 5000
    kernel_width: float | None = None  # resolved to 0.75 * sqrt(d)
    k: int = 10
    discretize_numeric: bool = True

    def __post_init__(self):
        if self.n_samples < 100:
            raise InvalidSpec(f"n_samples must be >= 100, got {self.n_samples}")
        if self.k < 1:
            raise InvalidSpec(f"k must be >= 1, got {self.k}")
        if self.kernel_width is not None and self.kernel_width <= 0:
            raise InvalidSpec("kernel_width must be positive")

    def resolved_kernel_width(self, d: int) -> float:
        return self.kernel_width if self.kernel_width is not None else 0.75 * math.sqrt(d)

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "kernel_width": self.kernel_width,
                "k": self.k, "discretize_numeric": self.discretize_numeric}


@dataclass(frozen=True)
class ShapleyConfig:
    background: np.ndarray = field(repr=False)
    exact_max_d: int = 15
    n_permutations: int = 2000

    def __post_init__(self):
        bg = np.atleast_2d(np.asarray(self.background, dtype=np.float64))
        object.__setattr__(self, "background", bg)
        if bg.shape[0] == 0:
            raise EmptyBackground("shapley needs a non-empty background sample")
        if self.exact_max_d > 20:
            raise InvalidSpec("exact coalition enumeration is capped at d = 20")
        if self.n_permutations < 1:
            raise InvalidSpec("n_permutations must be >= 1")

    def to_dict(self) -> dict:
        return {"exact_max_d": self.exact_max_d, "n_permutations": self.n_permutations,
                "background_rows": int(self.background.shape[0])}


def sample_neighborhood(row: np.ndarray, stats: MatrixStats, n_samples: int,
                        rng: np.random.Generator,
                        discretize_numeric: bool = True) -> np.ndarray:
    """Draw a neighborhood from the training marginals: binary indicators
    are Bernoulli with the training one-frequency, discretized numerics get
    a uniform quartile bin then a uniform value inside it, everything else
    is normal around the training mean. Row 0 is the (mean-imputed)
    instance itself. Columns with no training observations stay constant.
    """
    d = stats.d
    x = np.where(np.isnan(row), stats.means, row)
    out = np.empty((n_samples, d))
    out[0] = x
    n = n_samples - 1
    for j in range(d):
        dom = stats.domains[j]
        if dom is None:
            out[1:, j] = x[j]
        elif not np.isnan(stats.p_one[j]):
            out[1:, j] = (rng.random(n) < stats.p_one[j]).astype(np.float64)
        elif discretize_numeric and stats.bin_edges[j] is not None:
            edges = stats.bin_edges[j]
            bins = rng.integers(0, len(edges) - 1, size=n)
            lo, hi = edges[bins], edges[bins + 1]
            out[1:, j] = lo + rng.random(n) * (hi - lo)
        else:
            out[1:, j] = stats.means[j] + stats.scales[j] * rng.normal(size=n)
    return out


def kernel_weights(samples: np.ndarray, x: np.ndarray, stats: MatrixStats,
                   kernel_width: float) -> np.ndarray:
    """exp(-dist^2 / kw^2) with distances in standardized feature space."""
    u = (samples - x) / stats.scales
    dist2 = np.sum(u * u, axis=1)
    return np.exp(-dist2 / (kernel_width ** 2))


def _fit_design(samples: np.ndarray, x: np.ndarray, stats: MatrixStats,
                discretize: bool) -> np.ndarray:
    """Feature representation the linear fit runs on. Binary indicators and
    (when discretizing) binned numerics become same-value/same-bin-as-the-
    instance indicators; other numerics enter as raw values."""
    n, d = samples.shape
    design = np.empty((n, d))
    for j in range(d):
        if stats.domains[j] is None:
            design[:, j] = 0.0
        elif not np.isnan(stats.p_one[j]):
            design[:, j] = (samples[:, j] == x[j]).astype(np.float64)
        elif discretize and stats.bin_edges[j] is not None:
            target = stats.bin_of(j, x[j])
            inner = stats.bin_edges[j][1:-1]
            sample_bins = np.searchsorted(inner, samples[:, j], side="left")
            design[:, j] = (sample_bins == target).astype(np.float64)
        else:
            design[:, j] = samples[:, j]
    return design


def _forward_select(design: np.ndarray, y: np.ndarray, w: np.ndarray, k: int) -> list[int]:
    """Greedy weighted-SSE forward selection via incremental orthogonalization.

    Equivalent to refitting weighted least squares for every candidate at
    every step, at O(k * n * d): selected columns are peeled off all
    remaining candidates, so each candidate's score is the exact SSE drop
    it would contribute on top of the current selection."""
    sw = np.sqrt(w)
    A = design * sw[:, None]
    r = y * sw
    # intercept first: orthogonalize everything against the weighted mean
    ones = sw / np.linalg.norm(sw)
    A = A - ones[:, None] * (ones @ A)
    r = r - ones * (ones @ r)

    selected: list[int] = []
    norms = np.einsum("ij,ij->j", A, A)
    for _ in range(min(k, design.shape[1])):
        scores = np.where(norms > 1e-12, (r @ A) ** 2 / np.maximum(norms, 1e-12), -np.inf)
        if len(selected) > 0:
            scores[selected] = -np.inf
        j = int(np.argmax(scores))
        if not np.isfinite(scores[j]) or scores[j] <= 0.0:
            break
        q = A[:, j] / np.sqrt(norms[j])
        selected.append(j)
        proj = q @ A
        A = A - q[:, None] * proj
        norms = norms - proj ** 2
        r = r - q * (q @ r)
    return selected


def explain_surrogate(model, row: np.ndarray, matrix_stats: MatrixStats,
                      config: SurrogateConfig = SurrogateConfig(),
                      seed: int = 0) -> Explanation:
    """Fit a local weighted linear surrogate around one instance and return
    the k selected features with signed weights and influential intervals
    (the instance's quartile bin for discretized numerics, the instance
    value for binary indicators, a one-std band otherwise).

    A neighborhood whose predictions do not vary yields an all-zero,
    degenerate-flagged explanation instead of an error.
    """
    predict = _as_predict_fn(model)
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (matrix_stats.d,):
        raise WidthMismatch(matrix_stats.d, row.shape)
    d = matrix_stats.d
    rng = np.random.default_rng(seed)

    samples = sample_neighborhood(row, matrix_stats, config.n_samples, rng,
                                  config.discretize_numeric)
    x = samples[0]
    y = np.asarray(predict(samples), dtype=np.float64)

    if float(y.max() - y.min()) < _PREDICTION_SPREAD_TOL:
        return Explanation(attributions=(), selected_k=0, explainer_id=SURROGATE_ID,
                           seed_used=seed, n_features=d, degenerate=True)

    w = kernel_weights(samples, x, matrix_stats, config.resolved_kernel_width(d))
    design = _fit_design(samples, x, matrix_stats, config.discretize_numeric)
    selected = _forward_select(design, y, w, config.k)
    if not selected:
        return Explanation(attributions=(), selected_k=0, explainer_id=SURROGATE_ID,
                           seed_used=seed, n_features=d, degenerate=True)

    sw = np.sqrt(w)
    A = np.column_stack([design[:, selected], np.ones(len(y))]) * sw[:, None]
    beta, *_ = np.linalg.lstsq(A, y * sw, rcond=None)

    attributions = []
    for j in sorted(selected):
        coef = float(beta[selected.index(j)])
        if coef == 0.0:
            continue  # keep the exactly-selected_k-nonzero invariant honest
        attributions.append(Attribution(j, coef, _surrogate_interval(j, x, matrix_stats,
                                                                     config.discretize_numeric)))
    return Explanation(attributions=tuple(attributions), selected_k=len(attributions),
                       explainer_id=SURROGATE_ID, seed_used=seed, n_features=d)


def _surrogate_interval(j: int, x: np.ndarray, stats: MatrixStats,
                        discretize: bool) -> tuple[float, float]:
    if not np.isnan(stats.p_one[j]):
        return (float(x[j]), float(x[j]))
    if discretize and stats.bin_edges[j] is not None:
        return stats.bin_interval(j, stats.bin_of(j, float(x[j])))
    return (float(x[j] - stats.scales[j]), float(x[j] + stats.scales[j]))


def _exact_shapley(predict, row: np.ndarray, background: np.ndarray) -> np.ndarray:
    d = row.shape[0]
    n_masks = 1 << d
    n_bg = background.shape[0]
    v = np.empty(n_masks)
    chunk = max(1, _EXACT_ROW_BUDGET // n_bg)
    masks = np.arange(n_masks, dtype=np.int64)
    bits = (masks[:, None] >> np.arange(d)[None, :]) & 1  # (n_masks, d)
    for start in range(0, n_masks, chunk):
        block = bits[start:start + chunk].astype(bool)  # (b, d)
        composite = np.where(block[:, None, :], row[None, None, :], background[None, :, :])
        preds = predict(composite.reshape(-1, d)).reshape(block.shape[0], n_bg)
        v[start:start + chunk] = preds.mean(axis=1)

    counts = bits.sum(axis=1)
    fact = [math.factorial(s) for s in range(d + 1)]
    coeff = np.array([fact[s] * fact[d - 1 - s] / fact[d] for s in range(d)])
    phi = np.zeros(d)
    for i in range(d):
        without = masks[(masks >> i) & 1 == 0]
        gains = v[without | (1 << i)] - v[without]
        phi[i] = float(np.sum(coeff[counts[without]] * gains))
    return phi


def _sampled_shapley(predict, row: np.ndarray, background: np.ndarray,
                     n_permutations: int, rng: np.random.Generator) -> np.ndarray:
    d = row.shape[0]
    n_bg = background.shape[0]
    phi = np.zeros(d)
    batch = max(1, _PERMUTATION_ROW_BUDGET // (d + 1))
    done = 0
    while done < n_permutations:
        b = min(batch, n_permutations - done)
        composites = np.empty((b, d + 1, d))
        perms = np.empty((b, d), dtype=np.int64)
        for p in range(b):
            perm = rng.permutation(d)
            perms[p] = perm
            base = background[rng.integers(0, n_bg)]
            position = np.empty(d, dtype=np.int64)
            position[perm] = np.arange(d)
            # row t of the walk has the first t features of perm set to `row`
            take = position[None, :] < np.arange(d + 1)[:, None]
            composites[p] = np.where(take, row[None, :], base[None, :])
        preds = predict(composites.reshape(-1, d)).reshape(b, d + 1)
        gains = np.diff(preds, axis=1)  # (b, d), gain t belongs to perm[t]
        for p in range(b):
            phi[perms[p]] += gains[p]
        done += b
    return phi / n_permutations


def explain_shapley(model, row: np.ndarray, config: ShapleyConfig,
                    seed: int = 0) -> Explanation:
    """Shapley values under the value function v(S) = mean over background
    rows of the prediction on composites taking S's features from the
    instance. Exact coalition enumeration when d <= exact_max_d (seed
    independent), permutation sampling otherwise. Attributions carry no
    intervals; the perturbation planner infers them from value binning.
    """
    predict = _as_predict_fn(model)
    row = np.asarray(row, dtype=np.float64)
    background = config.background
    if row.ndim != 1 or background.shape[1] != row.shape[0]:
        raise WidthMismatch(background.shape[1], row.shape)
    d = row.shape[0]

    if d <= config.exact_max_d:
        phi = _exact_shapley(predict, row, background)
    else:
        rng = np.random.default_rng(seed)
        phi = _sampled_shapley(predict, row, background, config.n_permutations, rng)

    attributions = tuple(Attribution(j, float(phi[j]), None) for j in range(d))
    return Explanation(attributions=attributions, selected_k=d,
                       explainer_id=SHAPLEY_ID, seed_used=seed, n_features=d)


def derive_seed(base_seed: int, *path: int) -> int:
    """Deterministic child seed for a (base seed, index path) pair."""
    state = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF] + [int(p) for p in path])
    return int(state.generate_state(1, dtype=np.uint64)[0])


def repeat_explanations(explainer_fn, model, row: np.ndarray, m: int = 10,
                        base_seed: int = 0) -> ExplanationSet:
    """Run explainer_fn(model, row, seed) M times with per-repetition derived
    seeds. Each repetition genuinely recomputes the explanation; exact-
    Shapley repeats come out identical by construction."""
    if m < 2:
        raise InvalidSpec(f"need M >= 2 repeated explanations, got {m}")
    explanations = tuple(
        explainer_fn(model, row, derive_seed(base_seed, rep)) for rep in range(m)
    )
    return ExplanationSet(explanations=explanations)


def explanation_set_to_dict(es: ExplanationSet) -> dict:
    case_id, prefix_length = es.case_ref if es.case_ref else (None, None)
    return {
        "format_version": 1,
        "case_id": case_id,
        "prefix_length": prefix_length,
        "explainer_id": es.explainer_id,
        "n_features": es.n_features,
        "explanations": [e.to_dict() for e in es.explanations],
    }


def explanation_set_from_dict(doc: dict) -> ExplanationSet:
    try:
        case_id = doc.get("case_id")
        case_ref = None if case_id is None else (case_id, int(doc["prefix_length"]))
        explainer_id = doc["explainer_id"]
        d = int(doc["n_features"])
        explanations = tuple(
            Explanation(
                attributions=tuple(Attribution.from_dict(a) for a in e["attributions"]),
                selected_k=int(e["selected_k"]),
                explainer_id=explainer_id,
                seed_used=int(e["seed_used"]),
                n_features=d,
                case_ref=case_ref,
                degenerate=bool(e.get("degenerate", False)),
            )
            for e in doc["explanations"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidSpec(f"malformed explanation set document: {exc}") from exc
    return ExplanationSet(explanations=explanations, case_ref=case_ref)


def write_explanation_set(es: ExplanationSet, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(explanation_set_to_dict(es), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_explanation_set(path: str) -> ExplanationSet:
    with open(path, "r", encoding="utf-8") as fh:
        return explanation_set_from_dict(json.load(fh))
