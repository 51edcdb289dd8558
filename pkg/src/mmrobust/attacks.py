"""Inner maximisation: image PGD, greedy token substitution, EDA edits and
their multimodal compositions.

All attacks are batched over samples and *minimise* an objective: for the
cross-modal variants this is the cosine similarity between the attacked
sample and its counterpart, for the unimodal variants the negated (squared)
distance to the clean embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .model import ModelParams, encode_image, encode_text, embed_images, embed_texts, text_embed_from_pooled

ORDERS = ("T->I", "I->T", "T->I->T", "I->T->I")
OBJECTIVES = ("cross", "uni")


class AttackError(RuntimeError):
    """The attack could not proceed (e.g. non-finite gradients)."""


@dataclass(frozen=True)
class PerturbationBudget:
    """Allowed perturbation sets for both modalities.

    ``eps``/``steps``/``step_size`` bound the L-inf image attack; ``max_edits``
    and ``n_candidates`` bound the token-substitution attack.
    """

    eps: float = 2.0 / 255.0
    steps: int = 2
    step_size: float = 1.0 / 255.0
    image_objective: str = "cross"
    random_start: bool = False
    max_edits: int = 1
    n_candidates: int = 10
    text_objective: str = "cross"
    text_attack: str = "greedy"  # greedy | eda
    importance: str = "mask"  # mask | gradient
    max_positions: int | None = None
    eda_alpha: float = 0.3
    eda_samples: int = 1
    neutral_token: int = 24

    def __post_init__(self):
        if self.eps < 0 or self.step_size < 0 or self.steps < 0:
            raise ValueError("eps, step_size and steps must be non-negative")
        if self.max_edits < 0 or self.n_candidates < 0:
            raise ValueError("max_edits and n_candidates must be non-negative")
        if self.image_objective not in OBJECTIVES or self.text_objective not in OBJECTIVES:
            raise ValueError(f"objectives must be one of {OBJECTIVES}")
        if self.text_attack not in ("greedy", "eda"):
            raise ValueError("text_attack must be 'greedy' or 'eda'")
        if self.importance not in ("mask", "gradient"):
            raise ValueError("importance must be 'mask' or 'gradient'")

    @property
    def attacks_image(self) -> bool:
        return self.eps > 0 and self.steps > 0 and self.step_size > 0

    @property
    def attacks_text(self) -> bool:
        if self.text_attack == "eda":
            return self.eda_alpha > 0
        return self.max_edits > 0 and self.n_candidates > 0

    def image_only(self) -> "PerturbationBudget":
        return replace(self, max_edits=0, eda_alpha=0.0)

    def text_only(self) -> "PerturbationBudget":
        return replace(self, eps=0.0)


ZERO_BUDGET = PerturbationBudget(eps=0.0, steps=0, step_size=0.0, max_edits=0, eda_alpha=0.0)


@dataclass
class AttackResult:
    adversarial: object
    initial_objective: np.ndarray
    final_objective: np.ndarray
    steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


# --------------------------------------------------------------------------
# image attacks


def pgd(
    objective: Callable[[Tensor], Tensor],
    x0,
    eps: float,
    steps: int,
    step_size: float,
    random_start: bool = False,
    rng: np.random.Generator | None = None,
) -> AttackResult:
    """Signed-gradient descent on a per-sample objective inside an L-inf ball.

    ``objective`` maps an (n, d) tensor to an (n,) tensor of values to be
    minimised. Each step is projected onto the ball of radius ``eps`` around
    ``x0`` intersected with [0, 1]. The best iterate per sample is returned.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    lo = np.maximum(x0 - eps, 0.0)
    hi = np.minimum(x0 + eps, 1.0)
    x = x0.copy()
    if random_start and eps > 0:
        rng = rng or np.random.default_rng(0)
        x = np.clip(x0 + rng.uniform(-eps, eps, size=x0.shape), lo, hi)

    initial = objective(Tensor(x0)).data.copy()
    best = x0.copy()
    best_obj = initial.copy()
    taken = np.zeros(x0.shape[0], dtype=int)
    for step in range(steps):
        with Tape() as tape:
            xt = Tensor(x, requires_grad=True)
            obj = objective(xt)
            total = obj.sum()
        g = tape.backward(total, wrt=[xt])[xt]
        if not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite input gradient at PGD step {step}")
        better = obj.data < best_obj
        best[better] = x[better]
        best_obj[better] = obj.data[better]
        taken[better] = step
        x = np.clip(x - step_size * np.sign(g), lo, hi)
    if steps > 0:
        final = objective(Tensor(x)).data
        better = final < best_obj
        best[better] = x[better]
        best_obj[better] = final[better]
        taken[better] = steps
    return AttackResult(best, initial, best_obj, taken)


def _interp(n_out: int, n_in: int) -> np.ndarray:
    pos = np.linspace(0.0, n_in - 1.0, n_out)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = pos - lo
    M = np.zeros((n_out, n_in))
    M[np.arange(n_out), lo] += 1.0 - w
    M[np.arange(n_out), hi] += w
    return M


def rescale_matrix(d: int, scale: float, block: int = 6) -> np.ndarray:
    """Linear map resampling each consecutive ``block`` of coordinates to
    ``round(block*scale)`` points and back (the analog of rescaling an image
    while keeping its layout). A trailing block shorter than 2 is kept as is.
    """
    M = np.eye(d)
    if scale == 1.0:
        return M
    for start in range(0, d, block):
        n = min(block, d - start)
        if n < 2:
            continue
        m = max(2, int(round(n * scale)))
        M[start : start + n, start : start + n] = _interp(n, m) @ _interp(m, n)
    return M


def image_objective_fn(
    params: ModelParams,
    targets: np.ndarray,
    objective: str = "cross",
    scales: Sequence[float] = (1.0,),
) -> Callable[[Tensor], Tensor]:
    """Per-sample objective to minimise over images.

    cross: mean over ``scales`` of the cosine between the rescaled image's
    embedding and ``targets`` (a mean of unit text embeddings for set-level
    targets). uni: minus the squared distance between the image embedding and
    ``targets`` (the frozen clean embeddings).
    """
    targets = Tensor(np.asarray(targets, dtype=np.float64))
    if objective == "uni":

        def uni(x: Tensor) -> Tensor:
            diff = encode_image(params, x) - targets
            return ag.scale(ag.tsum(ag.multiply(diff, diff), axis=1), -1.0)

        return uni

    mats = [Tensor(rescale_matrix(params.W1.shape[0], s).T) for s in scales]

    def cross(x: Tensor) -> Tensor:
        total = None
        for s, R in zip(scales, mats):
            xs = x if s == 1.0 else x @ R
            term = ag.tsum(ag.multiply(encode_image(params, xs), targets), axis=1)
            total = term if total is None else total + term
        return total if len(mats) == 1 else ag.scale(total, 1.0 / len(mats))

    return cross


def pgd_image_attack(
    params: ModelParams,
    images,
    targets,
    budget: PerturbationBudget,
    rng: np.random.Generator | None = None,
    scales: Sequence[float] = (1.0,),
    reference: np.ndarray | None = None,
) -> AttackResult:
    """Image PGD against text targets (cross-modal) or the clean embedding (unimodal).

    ``targets`` is either a list of captions or an (n, d_E) array of target
    embeddings. For the unimodal objective ``reference`` defaults to the
    attacked model's own clean image embeddings; a random start is used since
    the distance objective has zero gradient at the clean point.
    """
    images = np.asarray(images, dtype=np.float64)
    if budget.image_objective == "uni":
        ref = embed_images(params, images) if reference is None else np.asarray(reference)
        fn = image_objective_fn(params, ref, "uni")
        random_start = True
    else:
        if isinstance(targets, np.ndarray) and targets.ndim == 2 and targets.dtype.kind == "f":
            t = targets
        else:
            t = embed_texts(params, targets)
        fn = image_objective_fn(params, t, "cross", scales)
        random_start = budget.random_start
    if not budget.attacks_image:
        return pgd(fn, images, 0.0, 0, 0.0)
    return pgd(fn, images, budget.eps, budget.steps, budget.step_size, random_start, rng)


# --------------------------------------------------------------------------
# text attacks


def _pad(captions: Sequence[Sequence[int]], fill: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(c) for c in captions], dtype=int)
    tok = np.full((len(captions), max(lengths.max(initial=1), 1)), fill, dtype=int)
    for i, c in enumerate(captions):
        tok[i, : len(c)] = c
    return tok, lengths


def neighbor_table(E: np.ndarray, k: int) -> np.ndarray:
    """For each token, the ``k`` other tokens closest in embedding space."""
    d = ((E[:, None, :] - E[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    k = min(k, E.shape[0] - 1)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def _text_objective(params: ModelParams, captions, targets: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", embed_texts(params, captions), targets)


def token_importance(
    params: ModelParams,
    captions: Sequence[Sequence[int]],
    targets: np.ndarray,
    mode: str = "mask",
    neutral_token: int = 24,
) -> np.ndarray:
    """Per-position importance (n, L_pad); padded positions get -inf.

    mask: drop in the objective when the token is replaced by ``neutral_token``.
    gradient: norm of the objective's gradient w.r.t. the token's embedding.
    """
    E = params.E.data
    tok, lengths = _pad(captions)
    n, L = tok.shape
    valid = np.arange(L)[None, :] < lengths[:, None]
    emb = E[tok] * valid[..., None]
    sums = emb.sum(axis=1)
    base = np.einsum("ij,ij->i", text_embed_from_pooled(params, sums / lengths[:, None]), targets)
    if mode == "gradient":
        # first-order estimate of the masking drop: (e_p - e_neutral) . d obj / d e_p
        z = sums / lengths[:, None] @ params.Wt.data + params.bt.data
        nz = np.linalg.norm(z, axis=1, keepdims=True)
        u = z / nz
        gz = (targets - u * np.einsum("ij,ij->i", u, targets)[:, None]) / nz
        gp = gz @ params.Wt.data.T / lengths[:, None]
        imp = np.einsum("ilj,ij->il", E[tok] - E[neutral_token], gp)
    else:
        masked = sums[:, None, :] - emb + E[neutral_token][None, None, :]
        obj = np.einsum("ilj,ij->il", text_embed_from_pooled(params, masked / lengths[:, None, None]), targets)
        imp = base[:, None] - obj
    imp[~valid] = -np.inf
    return imp


def text_attack_greedy(
    params: ModelParams,
    captions: Sequence[Sequence[int]],
    targets,
    budget: PerturbationBudget,
) -> AttackResult:
    """Greedy best-substitution attack on token ids.

    Each round scores every candidate substitution at the candidate positions
    (the ``max_positions`` most important ones, all by default), using the
    ``n_candidates`` nearest neighbours of the current token in embedding
    space, and accepts the single best one only if it strictly lowers the
    objective. At most ``max_edits`` positions change.

    ``targets`` are image embeddings (cross-modal) or captions/images to embed;
    with ``text_objective='uni'`` the targets are ignored and the clean text
    embeddings are used instead.
    """
    captions = [tuple(int(t) for t in c) for c in captions]
    n = len(captions)
    if budget.text_objective == "uni":
        t = embed_texts(params, captions)
    else:
        t = np.asarray(targets, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != n:
            t = embed_images(params, targets)
    current = [list(c) for c in captions]
    cur_obj = _text_objective(params, captions, t)
    initial = cur_obj.copy()
    edits = np.zeros(n, dtype=int)
    if not budget.attacks_text or n == 0:
        return AttackResult(captions, initial, cur_obj, edits)

    E = params.E.data
    nbrs = neighbor_table(E, budget.n_candidates)
    tok, lengths = _pad(captions)
    L = tok.shape[1]
    valid = np.arange(L)[None, :] < lengths[:, None]
    imp = token_importance(params, captions, t, budget.importance, budget.neutral_token)
    order = np.argsort(-imp, axis=1, kind="stable")
    allowed = valid.copy()
    if budget.max_positions is not None:
        allowed[:] = False
        top = order[:, : budget.max_positions]
        allowed[np.arange(n)[:, None], top] = True
        allowed &= valid
    # rank of each position in importance order, for deterministic tie-breaks
    rank = np.empty_like(order)
    rank[np.arange(n)[:, None], order] = np.arange(L)[None, :]

    active = np.ones(n, dtype=bool)
    for _ in range(min(budget.max_edits, L)):
        idx = np.flatnonzero(active & allowed.any(axis=1))
        if idx.size == 0:
            break
        cur_tok = tok[idx]
        sums = (E[cur_tok] * valid[idx][..., None]).sum(axis=1)
        cands = nbrs[cur_tok]  # (b, L, k)
        new = sums[:, None, None, :] - E[cur_tok][:, :, None, :] + E[cands]
        emb = text_embed_from_pooled(params, new / lengths[idx][:, None, None, None])
        obj = np.einsum("blkj,bj->blk", emb, t[idx])
        obj[~allowed[idx]] = np.inf
        b, _, k = obj.shape
        # order candidates by (objective, importance rank, neighbour rank)
        flat = obj.reshape(b, -1)
        tie = (rank[idx][:, :, None] * k + np.arange(k)[None, None, :]).reshape(b, -1)
        pick = np.lexsort((tie, flat), axis=-1)[:, 0]
        pos, kk = np.divmod(pick, k)
        proposals = []
        for r, i in enumerate(idx):
            if not np.isfinite(flat[r, pick[r]]):
                proposals.append(None)
                continue
            c = list(current[i])
            c[pos[r]] = int(cands[r, pos[r], kk[r]])
            proposals.append(c)
        keep = [r for r, c in enumerate(proposals) if c is not None]
        if keep:
            fresh = _text_objective(params, [proposals[r] for r in keep], t[idx[keep]])
        for j, r in enumerate(keep):
            i = idx[r]
            if fresh[j] < cur_obj[i]:
                current[i] = proposals[r]
                cur_obj[i] = fresh[j]
                tok[i, pos[r]] = current[i][pos[r]]
                allowed[i, pos[r]] = False
                edits[i] += 1
            else:
                active[i] = False
        for r, c in enumerate(proposals):
            if c is None:
                active[idx[r]] = False
    return AttackResult([tuple(c) for c in current], initial, cur_obj, edits)


def static_synonyms(world) -> list[np.ndarray]:
    """Concept-blind synonym table: fillers swap among fillers, attribute
    tokens drift to a neighbouring value of the same slot."""
    table = []
    fillers = world.filler_ids()
    for tkn in range(world.vocab_size):
        slot = world.token_slot(tkn)
        if slot is None:
            table.append(fillers[fillers != tkn])
        else:
            v = tkn - slot * world.n_values
            vals = [(v - 1) % world.n_values, (v + 1) % world.n_values]
            table.append(np.array(sorted({world.attr_token(slot, w) for w in vals})))
    return table


def embedding_synonyms(params: ModelParams, k: int = 5) -> list[np.ndarray]:
    return list(neighbor_table(params.E.data, k))


def eda_edit(
    caption: Sequence[int],
    alpha: float,
    rng: np.random.Generator,
    synonyms: Sequence[np.ndarray],
    max_len: int = 12,
) -> tuple[tuple[int, ...], int]:
    """One EDA draw: each token is touched with probability ``alpha`` and gets
    a synonym replacement, a synonym insertion, a swap or a deletion.

    Returns the edited caption and the number of touched tokens.
    """
    src = list(int(t) for t in caption)
    touched = rng.random(len(src)) < alpha
    ops = rng.integers(0, 4, size=len(src))
    out = list(src)
    # track positions of the original tokens inside ``out``
    where = list(range(len(src)))
    for i in np.flatnonzero(touched):
        op = int(ops[i])
        p = where[i]
        if p is None:
            continue
        syn = synonyms[out[p]]
        pick = int(syn[rng.integers(len(syn))]) if len(syn) else out[p]
        if op == 1 and len(out) < max_len:
            q = int(rng.integers(0, len(out) + 1))
            out.insert(q, pick)
            where = [w if w is None or w < q else w + 1 for w in where]
        elif op == 2 and len(out) > 1:
            q = int(rng.integers(0, len(out) - 1))
            q = q if q < p else q + 1
            out[p], out[q] = out[q], out[p]
        elif op == 3 and len(out) > 1:
            del out[p]
            where = [None if w == p else (w - 1 if w is not None and w > p else w) for w in where]
        else:
            out[p] = pick
    return tuple(out), int(touched.sum())


def eda_perturb_attack(
    caption: Sequence[int],
    alpha: float,
    n_samples: int,
    scorer: Callable[[list[tuple[int, ...]]], np.ndarray],
    rng: np.random.Generator,
    synonyms: Sequence[np.ndarray],
    max_len: int = 12,
) -> tuple[int, ...]:
    """Worst (lowest-scoring) of ``n_samples`` random EDA edits of ``caption``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if alpha <= 0:
        return tuple(int(t) for t in caption)
    draws = [eda_edit(caption, alpha, rng, synonyms, max_len)[0] for _ in range(n_samples)]
    scores = np.asarray(scorer(draws))
    return draws[int(np.argmin(scores))]


def text_attack(
    params: ModelParams,
    captions: Sequence[Sequence[int]],
    target_embs: np.ndarray,
    budget: PerturbationBudget,
    rng: np.random.Generator | None = None,
    synonyms: Sequence[np.ndarray] | None = None,
) -> list[tuple[int, ...]]:
    """Dispatch to the greedy or the EDA text attack."""
    if budget.text_attack == "greedy":
        return text_attack_greedy(params, captions, target_embs, budget).adversarial
    if not budget.attacks_text:
        return [tuple(c) for c in captions]
    rng = rng or np.random.default_rng(0)
    synonyms = synonyms if synonyms is not None else embedding_synonyms(params)
    refs = embed_texts(params, captions) if budget.text_objective == "uni" else target_embs
    out = []
    for c, t in zip(captions, refs):
        scorer = lambda cs, t=t: embed_texts(params, cs) @ t
        out.append(eda_perturb_attack(c, budget.eda_alpha, budget.eda_samples, scorer, rng, synonyms))
    return out


# --------------------------------------------------------------------------
# multimodal compositions


def compose_multimodal(
    params: ModelParams,
    images,
    captions: Sequence[Sequence[int]],
    budget: PerturbationBudget,
    order: str = "T->I",
    rng: np.random.Generator | None = None,
    trace: list | None = None,
    image_reference: np.ndarray | None = None,
) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    """Attack both modalities stage by stage in ``order``.

    Every stage targets the current (possibly already adversarial)
    counterpart but restarts from the clean sample of its own modality, so a
    repeated stage re-optimises within the same budget instead of stacking
    edits. ``trace``, if given, receives ``(stage, target_embeddings)`` per
    stage.
    """
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    clean_img = np.asarray(images, dtype=np.float64)
    clean_caps = [tuple(int(t) for t in c) for c in captions]
    img, caps = clean_img.copy(), list(clean_caps)
    ref = embed_images(params, clean_img) if image_reference is None else image_reference
    for stage in order.split("->"):
        if stage == "T":
            if not budget.attacks_text:
                continue
            target = embed_images(params, img)
            if trace is not None:
                trace.append(("T", target.copy()))
            caps = text_attack(params, clean_caps, target, budget, rng)
        else:
            if not budget.attacks_image:
                continue
            target = embed_texts(params, caps)
            if trace is not None:
                trace.append(("I", target.copy()))
            img = pgd_image_attack(params, clean_img, target, budget, rng, reference=ref).adversarial
    return img, caps


def eval_attack_coattack(params, images, captions, budget, rng=None):
    """Co-Attack analog: image first, then text against the adversarial image."""
    return compose_multimodal(params, images, captions, budget, "I->T", rng)


def eval_attack_sga(
    params: ModelParams,
    groups,
    budget: PerturbationBudget,
    n_text_views: int = 2,
    image_scales: Sequence[float] = (0.75, 1.0, 1.25),
    rng: np.random.Generator | None = None,
    synonyms: Sequence[np.ndarray] | None = None,
    max_len: int = 12,
) -> tuple[np.ndarray, list[list[tuple[int, ...]]]]:
    """Set-level analog of SGA over whole sample groups.

    1. every caption is attacked against the group's image, embedded as the
       mean over ``image_scales`` rescaled copies;
    2. the image is attacked against the mean embedding of the set of
       adversarial captions plus ``n_text_views`` EDA views of each, averaged
       over the rescaled copies;
    3. every clean caption is attacked again, now against the adversarial
       image.

    Returns the adversarial first images and, per group, the adversarial
    captions. With no views, the single scale 1.0 and one caption per group
    this is ``compose_multimodal`` with order T->I->T.
    """
    rng = rng or np.random.default_rng(0)
    images = np.stack([g.images[0] for g in groups])
    flat, owner = [], []
    for gi, g in enumerate(groups):
        for c in g.captions:
            flat.append(tuple(int(t) for t in c))
            owner.append(gi)
    owner = np.array(owner, dtype=int)
    text_budget = replace(budget, text_objective="cross")

    def scaled_embedding(x):
        if tuple(image_scales) == (1.0,):
            return embed_images(params, x)
        emb = sum(embed_images(params, x @ rescale_matrix(x.shape[1], s).T) for s in image_scales)
        return emb / np.linalg.norm(emb, axis=1, keepdims=True)

    stage1 = flat
    if budget.attacks_text:
        stage1 = text_attack(params, flat, scaled_embedding(images)[owner], text_budget, rng, synonyms)

    adv_img = images
    if budget.attacks_image:
        if n_text_views > 0 and synonyms is None:
            synonyms = embedding_synonyms(params)
        alpha = budget.eda_alpha or 0.3
        targets = np.zeros((len(groups), params.W2.shape[1]))
        counts = np.zeros(len(groups))
        views, view_owner = list(stage1), list(owner)
        for c, gi in zip(stage1, owner):
            for _ in range(n_text_views):
                views.append(eda_edit(c, alpha, rng, synonyms, max_len)[0])
                view_owner.append(gi)
        np.add.at(targets, np.array(view_owner), embed_texts(params, views))
        np.add.at(counts, np.array(view_owner), 1.0)
        targets /= counts[:, None]
        img_budget = replace(budget, image_objective="cross")
        adv_img = pgd_image_attack(params, images, targets, img_budget, rng, scales=image_scales).adversarial

    adv_flat = flat
    if budget.attacks_text:
        adv_flat = text_attack(params, flat, embed_images(params, adv_img)[owner], text_budget, rng, synonyms)
    adv_caps: list[list[tuple[int, ...]]] = [[] for _ in groups]
    for gi, c in zip(owner, adv_flat):
        adv_caps[gi].append(tuple(c))
    return adv_img, adv_caps
