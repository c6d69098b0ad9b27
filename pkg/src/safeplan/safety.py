"""Learned collision-risk predictor and the matrix -> ranking transform.

Each of the five views is projected by a frozen random matrix, the projected
sequence is folded by a single-layer tanh recurrent cell, and one linear head
per skill reads the final hidden state.  Only the cell and the heads train.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pddl
from .risk import INAPPLICABLE, RiskLabel, probe_risk
from .world import (
    N_VIEWS,
    SKILLS,
    VIEW_DIM,
    SceneConfig,
    WorldState,
    clone_world,
    dump_scene,
    execute_skill,
    extract_predicates,
    generate_scene,
    render_views,
    skill_action,
)

logger = logging.getLogger(__name__)

MODEL_FORMAT = "SAFETYMODEL v1"
EMBED_DIM = 16
HIDDEN_DIM = 64
PREDICTION_STEP = 0.5


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelParameters:
    skills: tuple[str, ...]
    encoder: np.ndarray  # (VIEW_DIM, embed), frozen
    w_in: np.ndarray  # (embed, hidden)
    w_rec: np.ndarray  # (hidden, hidden)
    b: np.ndarray  # (hidden,)
    head_w: np.ndarray  # (I, hidden)
    head_b: np.ndarray  # (I,)

    TRAINABLE = ("w_in", "w_rec", "b", "head_w", "head_b")

    @property
    def hidden(self) -> int:
        return self.b.shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.TRAINABLE}

    def copy(self) -> ModelParameters:
        return replace(self, **{k: getattr(self, k).copy() for k in ("encoder",) + self.TRAINABLE})

    def skill_index(self, skill: str) -> int:
        return self.skills.index(skill)


def init_params(
    skills: Sequence[str] = SKILLS,
    seed: int = 0,
    encoder_seed: int = 1234,
    embed: int = EMBED_DIM,
    hidden: int = HIDDEN_DIM,
    head_scale: float = 0.01,
) -> ModelParameters:
    enc_rng = np.random.default_rng(encoder_seed)
    rng = np.random.default_rng(seed)
    return ModelParameters(
        skills=tuple(skills),
        encoder=enc_rng.normal(0.0, 1.0 / math.sqrt(embed), size=(VIEW_DIM, embed)),
        w_in=rng.normal(0.0, 1.0 / math.sqrt(embed), size=(embed, hidden)),
        w_rec=rng.normal(0.0, 0.5 / math.sqrt(hidden), size=(hidden, hidden)),
        b=np.zeros(hidden),
        head_w=rng.normal(0.0, head_scale, size=(len(skills), hidden)),
        head_b=np.zeros(len(skills)),
    )


def encoder_digest(params: ModelParameters) -> str:
    return hashlib.sha256(np.ascontiguousarray(params.encoder).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _run(params: ModelParameters, views: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Encode and fold a batch (B, 5, 32); returns projected inputs and hidden states h_0..h_5."""
    if views.ndim != 3 or views.shape[1:] != (N_VIEWS, VIEW_DIM):
        raise ValueError(f"expected views of shape (B, {N_VIEWS}, {VIEW_DIM}), got {views.shape}")
    enc = views @ params.encoder
    hs = [np.zeros((views.shape[0], params.hidden))]
    for t in range(N_VIEWS):
        hs.append(np.tanh(enc[:, t] @ params.w_in + hs[-1] @ params.w_rec + params.b))
    return enc, hs


def forward_batch(params: ModelParameters, views: np.ndarray, skill_idx: np.ndarray) -> np.ndarray:
    _, hs = _run(params, views)
    skill_idx = np.asarray(skill_idx)
    return np.einsum("bh,bh->b", hs[-1], params.head_w[skill_idx]) + params.head_b[skill_idx]


def forward(params: ModelParameters, views: np.ndarray, i: int) -> float:
    """Predicted risk of skill head `i` for one (5, 32) view stack."""
    if not 0 <= i < len(params.skills):
        raise ValueError(f"skill index {i} out of range for {len(params.skills)} heads")
    return float(forward_batch(params, np.asarray(views)[None], np.array([i]))[0])


def loss_and_grads(
    params: ModelParameters, views: np.ndarray, skill_idx: np.ndarray, labels: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error over the batch and its gradient w.r.t. the trainable arrays."""
    enc, hs = _run(params, views)
    hT = hs[-1]
    w_sel = params.head_w[skill_idx]
    pred = np.einsum("bh,bh->b", hT, w_sel) + params.head_b[skill_idx]
    err = pred - labels
    n = len(labels)
    loss = float(np.mean(err ** 2))

    d_pred = 2.0 * err / n
    g_head_w = np.zeros_like(params.head_w)
    np.add.at(g_head_w, skill_idx, d_pred[:, None] * hT)
    g_head_b = np.zeros_like(params.head_b)
    np.add.at(g_head_b, skill_idx, d_pred)

    g_w_in = np.zeros_like(params.w_in)
    g_w_rec = np.zeros_like(params.w_rec)
    g_b = np.zeros_like(params.b)
    dh = d_pred[:, None] * w_sel
    for t in range(N_VIEWS, 0, -1):
        dz = dh * (1.0 - hs[t] ** 2)
        g_w_in += enc[:, t - 1].T @ dz
        g_w_rec += hs[t - 1].T @ dz
        g_b += dz.sum(axis=0)
        dh = dz @ params.w_rec.T
    return loss, {"w_in": g_w_in, "w_rec": g_w_rec, "b": g_b, "head_w": g_head_w, "head_b": g_head_b}


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryRecord:
    scene_ref: str
    skill_index: int
    object: str
    views: np.ndarray
    label: RiskLabel
    scene: str | None = None  # scene-file text of the recorded world

    @property
    def target(self) -> float:
        return self.label.risk


def derive_seed(*parts) -> int:
    digest = hashlib.blake2b("/".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def _jittered(w: WorldState, seed: int, scale: float = 0.002) -> WorldState:
    rng = np.random.default_rng(seed)
    out = clone_world(w)
    for o in out.table_objects():
        o.x = float(np.clip(o.x + rng.normal(0.0, scale), 0.0, 1.0))
        o.y = float(np.clip(o.y + rng.normal(0.0, scale), 0.0, 1.0))
    return out


def _label(w: WorldState, skill: str, obj: str, repeats: int, seed: int) -> float:
    if repeats <= 1:
        return probe_risk(w, skill, obj)
    values = [probe_risk(w, skill, obj)]
    values += [probe_risk(_jittered(w, derive_seed(seed, k)), skill, obj) for k in range(1, repeats)]
    return float(np.mean(values))


def records_for_world(
    w: WorldState, scene_ref: str, skills: Sequence[str], label_repeats: int = 1, keep_scene: bool = True
) -> list[TrajectoryRecord]:
    """One record per applicable (skill, object) pair of `w`.

    A fresh scene holds nothing, so `place` would never be applicable; for it
    the object is first picked on a clone and the record is taken from that
    post-pick world.
    """
    records: list[TrajectoryRecord] = []
    state = extract_predicates(w)
    snapshot = dump_scene(w) if keep_scene else None
    for i, skill in enumerate(skills):
        for obj in sorted(o.name for o in w.table_objects()) + ([w.held] if w.held else []):
            base = w
            ref, scene_text = scene_ref, snapshot
            action = skill_action(base, skill, obj)
            if not pddl.is_applicable(state, action):
                if skill != "place" or w.held is not None:
                    continue
                base = clone_world(w)
                if not execute_skill(base, skill_action(base, "pick", obj)).succeeded:
                    continue
                ref = f"{scene_ref}+pick:{obj}"
                scene_text = dump_scene(base) if keep_scene else None
            risk = _label(base, skill, obj, label_repeats, derive_seed(ref, skill, obj))
            records.append(TrajectoryRecord(ref, i, obj, render_views(base, obj), RiskLabel(i, obj, risk), scene_text))
    return records


def collect_dataset(
    templates: SceneConfig | Sequence[SceneConfig],
    episodes: int,
    seed: int,
    skills: Sequence[str] = SKILLS,
    label_repeats: int = 1,
    max_records: int | None = None,
) -> list[TrajectoryRecord]:
    """Randomised scenes -> records labelled by the exact risk oracle.

    Episode e draws its scene from templates[e % len(templates)] with a seed
    derived from (seed, e).
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if isinstance(templates, SceneConfig):
        templates = [templates]
    out: list[TrajectoryRecord] = []
    for e in range(episodes):
        tmpl = templates[e % len(templates)]
        cfg = replace(tmpl, seed=derive_seed(seed, "collect", e))
        w = generate_scene(cfg)
        out.extend(records_for_world(w, f"ep{e:06d}", skills, label_repeats))
        if max_records is not None and len(out) >= max_records:
            return out[:max_records]
    return out


def save_dataset(path: str | Path, records: Sequence[TrajectoryRecord], skills: Sequence[str] = SKILLS) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    header = f"I={len(skills)} VIEWDIM={VIEW_DIM} VIEWS={N_VIEWS} SKILLS={','.join(skills)}"
    with path.open("a") as fh:
        if new:
            fh.write(header + "\n")
        for r in records:
            values = " ".join(f"{v:.6e}" for v in r.views.ravel())
            fh.write(f"{r.scene_ref} {r.skill_index} {r.object} {r.label.risk:.6e} {values}\n")


def load_dataset(path: str | Path) -> tuple[tuple[str, ...], list[TrajectoryRecord]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = dict(kv.split("=", 1) for kv in lines[0].split())
    skills = tuple(header["SKILLS"].split(","))
    if int(header["I"]) != len(skills) or int(header["VIEWDIM"]) != VIEW_DIM or int(header["VIEWS"]) != N_VIEWS:
        raise ValueError(f"{path}: header {lines[0]!r} does not match this build")
    records = []
    width = N_VIEWS * VIEW_DIM
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if len(parts) != 4 + width:
            raise ValueError(f"{path}:{lineno}: expected {4 + width} fields, got {len(parts)}")
        i = int(parts[1])
        views = np.array([float(v) for v in parts[4:]]).reshape(N_VIEWS, VIEW_DIM)
        records.append(TrajectoryRecord(parts[0], i, parts[2], views, RiskLabel(i, parts[2], float(parts[3]))))
    return skills, records


def stack_records(records: Sequence[TrajectoryRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    views = np.stack([r.views for r in records])
    idx = np.array([r.skill_index for r in records], dtype=int)
    labels = np.array([r.target for r in records], dtype=float)
    return views, idx, labels


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParameters
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def train(
    params: ModelParameters,
    records: Sequence[TrajectoryRecord],
    lr: float = 1e-3,
    batch: int = 32,
    max_epochs: int = 200,
    seed: int = 0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    tol: float = 0.0,
) -> TrainResult:
    """Adam on the mean squared error; the encoder is never touched.

    `losses[k]` is the full-dataset MSE after epoch k.  Training stops early
    once it falls to `tol`.
    """
    if not records:
        raise TrainingError("empty dataset")
    views, idx, labels = stack_records(records)
    if not np.all(np.isfinite(labels)):
        raise TrainingError("non-finite labels in dataset")
    params = params.copy()
    m = {k: np.zeros_like(v) for k, v in params.trainable().items()}
    v = {k: np.zeros_like(a) for k, a in params.trainable().items()}
    rng = np.random.default_rng(seed)
    step = 0
    losses: list[float] = []
    n = len(labels)
    for epoch in range(max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            sel = order[start:start + batch]
            loss, grads = loss_and_grads(params, views[sel], idx[sel], labels[sel])
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged to {loss} at epoch {epoch}, step {step}")
            step += 1
            for k, g in grads.items():
                m[k] = beta1 * m[k] + (1 - beta1) * g
                v[k] = beta2 * v[k] + (1 - beta2) * g * g
                m_hat = m[k] / (1 - beta1 ** step)
                v_hat = v[k] / (1 - beta2 ** step)
                getattr(params, k)[...] -= lr * m_hat / (np.sqrt(v_hat) + eps)
        epoch_loss = float(np.mean((forward_batch(params, views, idx) - labels) ** 2))
        if not math.isfinite(epoch_loss):
            raise TrainingError(f"loss diverged to {epoch_loss} after epoch {epoch}")
        losses.append(epoch_loss)
        logger.debug("epoch %d mse %.6f", epoch, epoch_loss)
        if epoch_loss <= tol:
            break
    return TrainResult(params, losses)


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def save_model(path: str | Path, params: ModelParameters) -> None:
    embed, hidden = params.w_in.shape
    lines = [
        MODEL_FORMAT,
        f"SKILLS={','.join(params.skills)} VIEWDIM={VIEW_DIM} VIEWS={N_VIEWS} EMBED={embed} HIDDEN={hidden}",
    ]
    for name in ("encoder",) + ModelParameters.TRAINABLE:
        arr = getattr(params, name)
        lines.append(f"{name} {' '.join(str(d) for d in arr.shape)}")
        lines.append(" ".join(repr(float(x)) for x in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path: str | Path) -> ModelParameters:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MODEL_FORMAT:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} file")
    header = dict(kv.split("=", 1) for kv in lines[1].split())
    skills = tuple(header["SKILLS"].split(","))
    embed, hidden = int(header["EMBED"]), int(header["HIDDEN"])
    if int(header["VIEWDIM"]) != VIEW_DIM or int(header["VIEWS"]) != N_VIEWS:
        raise ValueError(f"{path}: view dimensions do not match this build")
    expected = {
        "encoder": (VIEW_DIM, embed),
        "w_in": (embed, hidden),
        "w_rec": (hidden, hidden),
        "b": (hidden,),
        "head_w": (len(skills), hidden),
        "head_b": (len(skills),),
    }
    arrays: dict[str, np.ndarray] = {}
    body = lines[2:]
    for k in range(0, len(body), 2):
        name, *dims = body[k].split()
        shape = tuple(int(d) for d in dims)
        if expected.get(name) != shape:
            raise ValueError(f"{path}: array {name} has shape {shape}, expected {expected.get(name)}")
        arrays[name] = np.array([float(x) for x in body[k + 1].split()]).reshape(shape)
    missing = set(expected) - set(arrays)
    if missing:
        raise ValueError(f"{path}: missing arrays {sorted(missing)}")
    return ModelParameters(skills=skills, **arrays)


def default_model_path() -> Path:
    from importlib import resources

    return Path(str(resources.files("safeplan").joinpath("data/safety_model.txt")))


# ---------------------------------------------------------------------------
# Inference and guidance
# ---------------------------------------------------------------------------


@dataclass
class SafetyMatrix:
    entries: np.ndarray
    skills: tuple[str, ...]
    objects: tuple[str, ...]
    source: str = "predicted"

    def value(self, skill: str, obj: str) -> float:
        return float(self.entries[self.skills.index(skill), self.objects.index(obj)])


def predict_matrix(
    params: ModelParameters, w: WorldState, skills: Sequence[str], objects: Sequence[str]
) -> SafetyMatrix:
    """Predicted risk for every (skill, object); inapplicable pairs get +inf.

    Predictions are clipped at zero since a collision count cannot be negative,
    then rounded to PREDICTION_STEP (half a collision) so sub-count noise
    ties instead of inventing an order between equally safe actions.
    """
    entries = np.full((len(skills), len(objects)), INAPPLICABLE)
    if len(skills) and len(objects):
        state = extract_predicates(w)
        views = np.stack([render_views(w, o) for o in objects])
        for i, skill in enumerate(skills):
            head = params.skill_index(skill)
            applicable = np.array([pddl.is_applicable(state, skill_action(w, skill, o)) for o in objects])
            if applicable.any():
                pred = forward_batch(params, views[applicable], np.full(applicable.sum(), head))
                entries[i, applicable] = np.round(np.maximum(pred, 0.0) / PREDICTION_STEP) * PREDICTION_STEP
    return SafetyMatrix(entries, tuple(skills), tuple(objects), "predicted")


def oracle_matrix(w: WorldState, skills: Sequence[str], objects: Sequence[str]) -> SafetyMatrix:
    from .risk import oracle_risk_matrix

    return SafetyMatrix(oracle_risk_matrix(w, skills, objects), tuple(skills), tuple(objects), "oracle")


ORDINALS = ("safest", "second safest", "third safest", "fourth safest", "fifth safest",
            "sixth safest", "seventh safest", "eighth safest", "ninth safest", "tenth safest")


def _ordinal(k: int) -> str:
    return ORDINALS[k] if k < len(ORDINALS) else f"{k + 1}-th safest"


@dataclass(frozen=True)
class SafetyRanking:
    order: tuple[tuple[str, str, int], ...]
    text: str


def matrix_to_ranking(m: SafetyMatrix) -> SafetyRanking:
    """Ascending risk, ties by object then skill; inapplicable pairs last and left out of the text."""
    cells = []
    for i, skill in enumerate(m.skills):
        for n, obj in enumerate(m.objects):
            cells.append((float(m.entries[i, n]), obj, skill))
    cells.sort(key=lambda c: (math.isinf(c[0]), c[0], c[1], c[2]))
    order = tuple((skill, obj, rank) for rank, (_, obj, skill) in enumerate(cells))
    sentences = [
        f"The {_ordinal(rank)} operator is to {skill} the {obj}."
        for rank, (value, obj, skill) in enumerate(cells)
        if not math.isinf(value)
    ]
    return SafetyRanking(order, " ".join(sentences))
