"""Joint content/style LoRA training on a single image.

One run fits two adapter sets on every cross-attention K/V projection of the
frozen base. What the variants add, cumulatively:

* ``baseline``: both deltas act on the combined prompt.
* ``M1``: each delta acts on its own trigger prompt (prompt separation).
* ``M2``: column masks grown from importance scores, plus the mask-overlap
  penalty.
* ``M3``: the block policy, which hands whole blocks to one role.

Step ``s`` runs as: recalibrate if ``s`` is scheduled, forward and backward,
Adam update, importance accumulation, invariant audit.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from . import seeding
from .autodiff import Tensor
from .base_model import BaseModel
from .checkpoint import Checkpoint
from .denoiser import PromptTriple, block_of, predict_noise, q_sample, schedule_for
from .lora import CONTENT, ROLES, STYLE, ColumnMask, LoraAdapter, LoraSet, combine_terms, lora_delta, naive_kv, separated_terms
from .synthworld import SynthSpec, render

VARIANTS = ("baseline", "M1", "M2", "M3")
AUTO = "auto"


class ConfigError(ValueError):
    """Bad configuration text or value; the message names the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# --------------------------------------------------------------------------- configuration


@dataclass(frozen=True)
class TrainConfig:
    rank: int = 8
    lr: float = 5e-3
    steps: int = 600
    batch_size: int = 1
    recal_period: int = 200
    column_cap: float = 30.0  # percent of d_out
    warmup: int = 5
    lambda_orth: float = 0.5
    variant: str = "M3"
    seed: int = 0
    subject: str = AUTO
    style: str = AUTO
    binary_masks: bool = False

    def __post_init__(self):
        checks = [
            ("rank", self.rank >= 1, "must be at least 1"),
            ("lr", self.lr > 0 and math.isfinite(self.lr), "must be a positive number"),
            ("steps", self.steps >= 0, "must be non-negative"),
            ("batch_size", self.batch_size >= 1, "must be at least 1"),
            ("recal_period", self.recal_period > 0, "must be positive"),
            ("column_cap", 0 < self.column_cap <= 100, "must lie in (0, 100]"),
            ("warmup", 0 <= self.warmup < self.recal_period, "must be non-negative and below recal_period"),
            ("lambda_orth", self.lambda_orth >= 0, "must be non-negative"),
            ("variant", self.variant in VARIANTS, f"must be one of {VARIANTS}"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, f"{msg} (got {getattr(self, key)!r})")

    @property
    def masked(self) -> bool:
        return self.variant in ("M2", "M3")

    def cap(self, d_out: int) -> int:
        return math.ceil(round(self.column_cap * d_out / 100.0, 9))

    def per_round(self, d_out: int) -> int:
        return math.ceil(round(self.column_cap * d_out / 300.0, 9))

    def recalibration_steps(self) -> list[int]:
        """Warm-up end, then every ``recal_period`` steps while inside the run."""
        return list(range(self.warmup, self.steps, self.recal_period))

    def dumps(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str, overrides: Iterable[str] = ()) -> "TrainConfig":
        """Parse flat ``key=value`` lines (``#`` comments allowed), then apply overrides."""
        values: dict[str, str] = {}
        lines = [ln for ln in text.splitlines()] + list(overrides)
        for raw in lines:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(line, "expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, val in values.items():
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
            kwargs[key] = _parse(key, known[key].type, val)
        return cls(**kwargs)

    def with_overrides(self, overrides: Iterable[str]) -> "TrainConfig":
        return TrainConfig.loads(self.dumps(), overrides)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, typ, val: str):
    try:
        if typ in ("bool", bool):
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if typ in ("int", int):
            return int(val)
        if typ in ("float", float):
            return float(val)
        return val
    except ValueError:
        raise ConfigError(key, f"cannot parse {val!r} as {typ}") from None


def training_pair(config: TrainConfig, spec: SynthSpec) -> tuple[str, str]:
    """Subject and style for a run; ``auto`` cycles through the world's factors by seed."""
    subject = config.subject if config.subject != AUTO else spec.subjects[config.seed % len(spec.subjects)].id
    style = config.style if config.style != AUTO else spec.styles[config.seed % len(spec.styles)].id
    try:
        spec.subject(subject)
    except KeyError:
        raise ConfigError("subject", f"unknown subject {subject!r}") from None
    try:
        spec.style(style)
    except KeyError:
        raise ConfigError("style", f"unknown style {style!r}") from None
    return subject, style


# --------------------------------------------------------------------------- block policy

POLICY_MODES = ("content-full", "style-full", "shared-sparse")


@dataclass(frozen=True)
class BlockPolicy:
    modes: dict

    def __post_init__(self):
        for block, mode in self.modes.items():
            if mode not in POLICY_MODES:
                raise ValueError(f"block {block!r} has unknown mode {mode!r}")

    @classmethod
    def default(cls, blocks: Iterable[str]) -> "BlockPolicy":
        def mode(b: str) -> str:
            if b.startswith("up0"):
                return "content-full"
            if b.startswith("up1"):
                return "style-full"
            return "shared-sparse"

        return cls({b: mode(b) for b in blocks})

    @classmethod
    def all_shared(cls, blocks: Iterable[str]) -> "BlockPolicy":
        return cls({b: "shared-sparse" for b in blocks})


def apply_block_policy(policy: BlockPolicy, layer_id: str, role: str) -> str:
    """Constraint on one role's mask in one layer: ``full`` or ``sparse``."""
    block = block_of(layer_id)
    if block not in policy.modes:
        raise KeyError(f"block {block!r} is not covered by the policy")
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    mode = policy.modes[block]
    if (mode, role) in (("content-full", CONTENT), ("style-full", STYLE)):
        return "full"
    return "sparse"


def layer_constraints(config: TrainConfig, layer_ids: Iterable[str], blocks: Iterable[str]) -> dict:
    """``(role, layer) -> full | sparse | frozen-mask`` for a variant.

    ``frozen-mask`` means the mask stays all-ones and is never trained, which
    is how the unmasked variants run.
    """
    layer_ids = list(layer_ids)
    if not config.masked:
        return {(r, lid): "frozen-mask" for r in ROLES for lid in layer_ids}
    blocks = list(blocks)
    policy = BlockPolicy.default(blocks) if config.variant == "M3" else BlockPolicy.all_shared(blocks)
    return {(r, lid): apply_block_policy(policy, lid, r) for r in ROLES for lid in layer_ids}


def checkpoint_policy(config: TrainConfig, blocks: Iterable[str]) -> dict[str, str]:
    blocks = list(blocks)
    if not config.masked:
        return {b: "unmasked" for b in blocks}
    policy = BlockPolicy.default(blocks) if config.variant == "M3" else BlockPolicy.all_shared(blocks)
    return dict(policy.modes)


# --------------------------------------------------------------------------- importance and masks


@dataclass
class ImportanceState:
    """Column scores per ``(role, layer)``, accumulated since the last recalibration."""

    scores: dict = field(default_factory=dict)
    steps_accumulated: int = 0
    resets: int = 0

    def get(self, role: str, layer_id: str, d_out: int) -> np.ndarray:
        key = (role, layer_id)
        if key not in self.scores:
            self.scores[key] = np.zeros(d_out)
        return self.scores[key]

    def reset(self) -> None:
        for key in self.scores:
            self.scores[key] = np.zeros_like(self.scores[key])
        self.steps_accumulated = 0
        self.resets += 1


def column_importance(adapter, grad_of_delta, role: str, state: ImportanceState) -> ImportanceState:
    """Add ``|sum_k g[k, j] * dW[k, j]|`` to column ``j``'s score.

    ``grad_of_delta`` is the loss gradient with respect to the adapter's
    effective (masked) delta. The product estimates, to first order, how much
    the loss would move if column ``j`` were switched off.
    """
    delta = adapter.B.data @ adapter.A.data
    g = np.asarray(grad_of_delta, dtype=np.float64)
    if g.shape != delta.shape:
        raise ad.ShapeError(f"gradient shape {g.shape} does not match delta {delta.shape}")
    scores = state.get(role, adapter.layer_id, delta.shape[1])
    state.scores[(role, adapter.layer_id)] = scores + np.abs((g * delta).sum(axis=0))
    return state


def _ranked(scores: np.ndarray, exclude: set[int]) -> list[int]:
    # highest score first, lower column index breaks ties
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return [j for j in order if j not in exclude]


def recalibrate_masks(
    content: LoraSet,
    style: LoraSet,
    importance: ImportanceState,
    config: TrainConfig,
    constraints: dict,
    initial: bool,
) -> dict:
    """Grow every sparse mask by up to one round of columns.

    On the initial call every sparse support is replaced by its first round.
    On shared-sparse layers the two roles never share a column: a column that
    both roles want this round goes to the higher score (content on ties),
    and the loser takes its next candidate. Returns the columns added per
    ``(role, layer)``. Importance is reset afterwards.
    """
    sets = {CONTENT: content, STYLE: style}
    added: dict = {}
    for lid in content.layer_ids():
        sparse = [r for r in ROLES if constraints[(r, lid)] == "sparse"]
        if not sparse:
            continue
        d_out = content.mask(lid).d_out
        cap, step = config.cap(d_out), config.per_round(d_out)
        current = {r: set() if initial else set(sets[r].mask(lid).support.tolist()) for r in ROLES}
        shared = len(sparse) == 2
        scores = {r: importance.get(r, lid, d_out) for r in ROLES}
        want = {r: min(step, cap - len(current[r])) for r in sparse}
        taken: set[int] = set()
        if shared:
            taken = current[CONTENT] | current[STYLE]
        picks: dict = {r: [] for r in sparse}
        while True:
            used = taken | {j for r in sparse for j in picks[r]}
            cand = {}
            for r in sparse:
                need = want[r] - len(picks[r])
                if need > 0:
                    pool = _ranked(scores[r], used if shared else current[r] | set(picks[r]))
                    cand[r] = pool[:need]
            cand = {r: c for r, c in cand.items() if c}
            if not cand:
                break
            if shared and len(cand) == 2:
                for j in set(cand[CONTENT]) & set(cand[STYLE]):
                    loser = STYLE if scores[CONTENT][j] >= scores[STYLE][j] else CONTENT
                    cand[loser].remove(j)
            for r, c in cand.items():
                picks[r].extend(c)
        for r in sparse:
            mask = sets[r].mask(lid)
            if initial:
                mask.restrict(picks[r])
            else:
                mask.add_columns(picks[r])
            added[(r, lid)] = sorted(picks[r])
    importance.reset()
    return added


def orthogonality_loss(content_masks: dict, style_masks: dict) -> Tensor:
    """``sum_i |m_c^i . m_s^i|`` over layers; masks are ``(d_out,)`` tensors."""
    if set(content_masks) != set(style_masks):
        raise ValueError("content and style masks cover different layers")
    total = None
    for lid in sorted(content_masks):
        mc, ms = content_masks[lid], style_masks[lid]
        mc = mc if isinstance(mc, Tensor) else Tensor(mc)
        ms = ms if isinstance(ms, Tensor) else Tensor(ms)
        if mc.shape != ms.shape:
            raise ad.ShapeError(f"{lid}: mask shapes {mc.shape} and {ms.shape} differ")
        term = ad.abs_(ad.sum_(ad.mul(mc, ms)))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else Tensor(0.0)


# --------------------------------------------------------------------------- training state


@dataclass
class TrainState:
    config: TrainConfig
    base: BaseModel
    image: np.ndarray
    prompts: PromptTriple
    content: LoraSet
    style: LoraSet
    constraints: dict
    optimizer: ad.AdamState
    mask_optimizer: ad.AdamState | None = None
    importance: ImportanceState = field(default_factory=ImportanceState)
    step: int = 0
    history: list = field(default_factory=list)
    recalibrations: list = field(default_factory=list)
    masks_active: bool = False
    rng: np.random.Generator | None = None

    def lora_params(self) -> list[Tensor]:
        out = []
        for s in (self.content, self.style):
            for lid in s.layer_ids():
                out += s.adapter(lid).parameters()
        return out

    def mask_params(self) -> list[Tensor]:
        if self.config.binary_masks:
            return []
        return [
            s.mask(lid).values
            for r, s in ((CONTENT, self.content), (STYLE, self.style))
            for lid in s.layer_ids()
            if self.constraints[(r, lid)] == "sparse"
        ]


def init_state(base: BaseModel, image: np.ndarray, config: TrainConfig) -> TrainState:
    weights = base.weights
    weights.set_trainable(False)
    init_rng = seeding.rng(config.seed, seeding.LORA_INIT)
    content = LoraSet.init(CONTENT, weights, config.rank, init_rng)
    style = LoraSet.init(STYLE, weights, config.rank, init_rng)
    for s in (content, style):
        for lid in s.layer_ids():
            for p in s.adapter(lid).parameters():
                p.requires_grad = True
    constraints = layer_constraints(config, content.layer_ids(), weights.config.blocks)
    state = TrainState(
        config=config,
        base=base,
        image=np.asarray(image, dtype=np.float64),
        prompts=base.prompts(),
        content=content,
        style=style,
        constraints=constraints,
        optimizer=ad.adam_init([]),
        rng=seeding.rng(config.seed, seeding.TRAIN_NOISE),
    )
    state.optimizer = ad.adam_init(state.lora_params())
    return state


def _mask_tensor(state: TrainState, role: str, lid: str) -> Tensor:
    lset = state.content if role == CONTENT else state.style
    kind = state.constraints[(role, lid)]
    mask = lset.mask(lid)
    if kind == "sparse" and state.masks_active:
        return mask.effective()
    return Tensor(np.ones(mask.d_out))


def _forward(state: TrainState, z_t: np.ndarray, t: np.ndarray):
    """Noise prediction plus the masked adapter terms keyed by ``(role, layer)``."""
    weights = state.base.weights
    p = state.prompts
    terms: dict = {}

    def provider(block: str):
        out = []
        for kind, W0 in zip(("K", "V"), weights.kv_weights(block)):
            lid = f"{block}.{kind}"
            dW_c = lora_delta(state.content.adapter(lid))
            dW_s = lora_delta(state.style.adapter(lid))
            if state.config.variant == "baseline":
                out.append(naive_kv(W0, dW_c, dW_s, p.combined))
                continue
            m_c = _mask_tensor(state, CONTENT, lid)
            m_s = _mask_tensor(state, STYLE, lid)
            base, s_term, c_term = separated_terms(W0, (dW_s, m_s), (dW_c, m_c), p.combined, p.style, p.subject)
            terms[(CONTENT, lid)] = c_term
            terms[(STYLE, lid)] = s_term
            out.append(combine_terms(base, s_term, c_term))
        return out[0], out[1]

    return predict_noise(weights, provider, z_t, t), terms


def _orth_term(state: TrainState) -> Tensor | None:
    if not (state.config.masked and state.masks_active and state.config.lambda_orth > 0):
        return None
    lids = state.content.layer_ids()
    mc = {lid: _mask_tensor(state, CONTENT, lid) for lid in lids}
    ms = {lid: _mask_tensor(state, STYLE, lid) for lid in lids}
    return orthogonality_loss(mc, ms)


def _activate_masks(state: TrainState) -> None:
    state.masks_active = True
    params = state.mask_params()
    for p in params:
        p.requires_grad = True
    state.mask_optimizer = ad.adam_init(params)


def train_step(state: TrainState) -> dict:
    """Run one optimisation step and return its loss-log row."""
    cfg = state.config
    if cfg.masked and state.step in cfg.recalibration_steps():
        initial = not state.masks_active
        recalibrate_masks(state.content, state.style, state.importance, cfg, state.constraints, initial)
        if initial:
            _activate_masks(state)
        state.recalibrations.append(state.step)

    sched = schedule_for(state.base.config)
    T = state.base.config.T
    n = cfg.batch_size
    t = state.rng.integers(1, T + 1, size=n)
    x0 = np.repeat(state.image[None], n, axis=0)
    eps = state.rng.standard_normal(x0.shape)
    z_t = q_sample(sched, x0, t, eps)

    with ad.Tape() as tape:
        pred, terms = _forward(state, z_t, t)
        l_db = ad.mse(pred, Tensor(eps))
        orth = _orth_term(state)
        total = l_db if orth is None else ad.add(l_db, ad.scale(orth, cfg.lambda_orth))
        # the penalty depends on mask values alone, so A and B see only L_DB
        grads = tape.backward(total)

    if cfg.masked:
        # scored against the weights the gradient was taken at
        _accumulate_importance(state, terms, grads)

    params = state.lora_params()
    state.optimizer = ad.adam_step(params, [grads.get(p) for p in params], state.optimizer, cfg.lr)
    if state.masks_active and state.mask_optimizer is not None:
        mparams = state.mask_params()
        state.mask_optimizer = ad.adam_step(mparams, [grads.get(p) for p in mparams], state.mask_optimizer, cfg.lr)

    row = {
        "step": state.step,
        "L_DB": l_db.item(),
        "L_orth": orth.item() if orth is not None else 0.0,
        "total": total.item(),
        "S_c": sum(len(state.content.mask(l).support) for l in state.content.layer_ids()),
        "S_s": sum(len(state.style.mask(l).support) for l in state.style.layer_ids()),
    }
    state.history.append(row)
    state.step += 1
    return row


def _accumulate_importance(state: TrainState, terms: dict, grads: dict) -> None:
    x = {CONTENT: state.prompts.subject, STYLE: state.prompts.style}
    for (role, lid), term in terms.items():
        if state.constraints[(role, lid)] != "sparse":
            continue
        delta_grad = grads.get(term)
        if delta_grad is None:
            continue
        g = delta_grad.reshape(-1, delta_grad.shape[-1]) if delta_grad.ndim > 2 else delta_grad
        xr = x[role]
        # gradient of the loss with respect to the masked delta
        G = np.tile(xr, (g.shape[0] // xr.shape[0], 1)).T @ g
        lset = state.content if role == CONTENT else state.style
        column_importance(lset.adapter(lid), G, role, state.importance)
    state.importance.steps_accumulated += 1


# --------------------------------------------------------------------------- auditing


@dataclass
class InvariantAuditor:
    """Checks cap, disjointness and monotone growth after each step."""

    checks: int = 0
    violations: list = field(default_factory=list)
    _last: dict = field(default_factory=dict)

    def __call__(self, state: TrainState) -> None:
        self.checks += 1
        cfg = state.config
        for lid in state.content.layer_ids():
            sup = {}
            for role, lset in ((CONTENT, state.content), (STYLE, state.style)):
                mask = lset.mask(lid)
                s = set(mask.support.tolist())
                sup[role] = s
                kind = state.constraints[(role, lid)]
                if kind == "sparse" and state.masks_active and len(s) > cfg.cap(mask.d_out):
                    self.violations.append(f"step {state.step}: {role} {lid} support {len(s)} exceeds cap")
                if kind == "sparse" and state.masks_active:
                    off = np.ones(mask.d_out, dtype=bool)
                    off[mask.support] = False
                    if np.any(mask.values.data[off] != 0):
                        self.violations.append(f"step {state.step}: {role} {lid} has mass off its support")
                prev = self._last.get((role, lid))
                if prev is not None and state.masks_active and prev[0] and not prev[1] <= s:
                    self.violations.append(f"step {state.step}: {role} {lid} lost columns")
                self._last[(role, lid)] = (state.masks_active, s)
            shared = all(state.constraints[(r, lid)] == "sparse" for r in ROLES)
            if shared and state.masks_active and sup[CONTENT] & sup[STYLE]:
                self.violations.append(f"step {state.step}: {lid} supports overlap")


# --------------------------------------------------------------------------- full run


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    recalibrations: list
    auditor: InvariantAuditor
    base_unchanged: bool
    subject: str
    style: str


def run_training(
    base: BaseModel,
    config: TrainConfig,
    image: np.ndarray | None = None,
    auditor: Callable[[TrainState], None] | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train both adapter sets on one image.

    With ``image=None`` the image is rendered from the config's subject and
    style on the base model's synthetic world.
    """
    subject, style = training_pair(config, base.spec)
    if image is None:
        image = render(base.spec.subject(subject), base.spec.style(style))
    before = base.weights.to_bytes()
    state = init_state(base, image, config)
    audit = auditor if auditor is not None else InvariantAuditor()
    for _ in range(config.steps):
        row = train_step(state)
        audit(state)
        if progress is not None:
            progress(row)
    unchanged = base.weights.to_bytes() == before
    if not unchanged and isinstance(audit, InvariantAuditor):
        audit.violations.append("base weights changed during training")
    ckpt = Checkpoint(
        config_hash=base.config_hash,
        vocab_seed=base.recipe.vocab_seed,
        content=_frozen_copy(state.content),
        style=_frozen_copy(state.style),
        policy=checkpoint_policy(config, base.config.blocks),
    )
    return TrainResult(ckpt, state.history, state.recalibrations, audit, unchanged, subject, style)


def _frozen_copy(lset: LoraSet) -> LoraSet:
    out = LoraSet(lset.role)
    for lid, (a, m) in lset.layers.items():
        adapter = LoraAdapter(lid, Tensor(a.B.data.copy(), name=a.B.name), Tensor(a.A.data.copy(), name=a.A.name))
        out.layers[lid] = (adapter, ColumnMask(Tensor(m.values.data.copy()), m.support.copy()))
    return out


LOSS_FIELDS = ("step", "L_DB", "L_orth", "total", "|S_c|", "|S_s|")


def loss_log_csv(history: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_FIELDS)
    for r in history:
        w.writerow([r["step"], repr(r["L_DB"]), repr(r["L_orth"]), repr(r["total"]), r["S_c"], r["S_s"]])
    return buf.getvalue()


# --------------------------------------------------------------------------- parameter accounting


@dataclass(frozen=True)
class LayerCount:
    layer_id: str
    d_in: int
    d_out: int
    rank: int
    support_c: int
    support_s: int
    overlap: int
    mode: str
    trainable: int
    full_pair: int


def _role_count(d_in: int, d_out: int, r: int, support: int, full: bool) -> int:
    if full:
        return d_in * r + r * d_out
    return d_in * r + r * support + support


def parameter_table(ckpt: Checkpoint) -> list[LayerCount]:
    """Trainable parameters per layer.

    A role whose mask is pinned (policy-full or unmasked) counts all of ``B``
    and ``A``. A sparse role counts ``B``, the ``A`` columns in its support
    and one trained mask value per support column.
    """
    rows = []
    for lid in ckpt.content.layer_ids():
        ac, mc = ckpt.content.layers[lid]
        _, ms = ckpt.style.layers[lid]
        mode = ckpt.policy.get(block_of(lid), "unmasked")
        full_c = mode in ("content-full", "unmasked")
        full_s = mode in ("style-full", "unmasked")
        sc, ss = len(mc.support), len(ms.support)
        trainable = _role_count(ac.d_in, ac.d_out, ac.rank, sc, full_c) + _role_count(ac.d_in, ac.d_out, ac.rank, ss, full_s)
        rows.append(LayerCount(
            lid, ac.d_in, ac.d_out, ac.rank, sc, ss,
            len(set(mc.support.tolist()) & set(ms.support.tolist())),
            mode, trainable, 2 * (ac.d_in * ac.rank + ac.rank * ac.d_out),
        ))
    return rows


def parameter_reduction(ckpt: Checkpoint) -> float:
    rows = parameter_table(ckpt)
    return 1.0 - sum(r.trainable for r in rows) / sum(r.full_pair for r in rows)
