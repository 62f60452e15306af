"""Memorization and membership-inference evaluation of trained generators.

Two complementary probes: exhaustive nearest-neighbor search from each
synthetic image into the training set (pixel L2 and perceptual distance,
distance ratios, copy flags), and a denoising-error membership inference
attack whose separation between training members and held-out nonmembers is
scored with ROC-AUC (0.5 = no leakage).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.stats import rankdata

from .backbone import ModelParams, encode_mask_onehot, module_from_params
from .core import derive_seed
from .ddpm import NoiseSchedule, forward_sample
from .errors import (
    ConfigError,
    EmptyGroupError,
    ProtocolError,
    ProvenanceError,
    SplitLeakError,
)
from .fidelity import FeatureEmbedder
from .flowmatch import GridVelocity, ot_interpolate
from .ldm import ae_encode, pool_mask_to_latent

NN_METRICS = ("L2", "LPIPS")
DIFFUSION_T_LEVELS = (100, 300, 500)
FLOW_T_LEVELS = (0.1, 0.3, 0.5)
MIA_REPEATS = 8
COPY_TAU_FRACTION = 0.01
SCORE_MODES = ("denoise", "reconstruct")

# Published full-scale reference magnitudes shown alongside desk-scale
# numbers for context; they are not reproduction targets at this resolution.
FULL_SCALE_ANCHORS = {
    "ddpm": {"mia_auc": 0.6029, "nndr": 0.83},
    "ldm": {"mia_auc": 0.580, "nndr": 0.85},
    "fm": {"mia_auc": 0.6038, "nndr": 0.87},
}


# ---------------------------------------------------------------------------
# nearest-neighbor memorization analysis
# ---------------------------------------------------------------------------


@dataclass
class NNMatch:
    synth_id: int
    nearest_train_id: int
    d1: float
    d2: float
    metric: str


def _grid_of(obj) -> np.ndarray:
    grid = obj.grid if hasattr(obj, "grid") else np.asarray(obj)
    if grid.ndim != 2:
        raise ConfigError(f"expected 2-D images, got shape {grid.shape}")
    return np.asarray(grid, dtype=np.float64)


def _flat_grids(images) -> np.ndarray:
    return np.stack([_grid_of(im).ravel() for im in images])


def _l2_row(query: np.ndarray, refs: np.ndarray) -> np.ndarray:
    return np.sqrt(((refs - query) ** 2).sum(axis=1))


def _unit_tap_features(embedder: FeatureEmbedder, images, batch_size: int = 64):
    """Channel-unit-normalized tap activations, flattened per tap layer."""
    embedder.check_frozen()
    net = embedder.module()
    grids = np.stack([_grid_of(im) for im in images]).astype(np.float32)[:, None]
    per_tap = None
    with torch.no_grad():
        for start in range(0, len(grids), batch_size):
            taps = net.taps(torch.from_numpy(grids[start : start + batch_size]))
            if per_tap is None:
                per_tap = [[] for _ in taps]
            for i, tap in enumerate(taps):
                norm = torch.sqrt(torch.sum(tap**2, dim=1, keepdim=True) + 1e-10)
                unit = tap / norm
                per_tap[i].append(unit.reshape(unit.shape[0], -1).numpy())
    return [(np.concatenate(chunks), chunks[0].shape[1]) for chunks in per_tap]


def _lpips_rows(synth_taps, train_taps):
    """Pairwise sums over taps of mean squared unit-feature differences."""
    n_synth = synth_taps[0][0].shape[0]
    n_train = train_taps[0][0].shape[0]
    dists = np.zeros((n_synth, n_train), dtype=np.float64)
    for (sf, width), (tf, _) in zip(synth_taps, train_taps):
        for i in range(n_synth):
            diff = tf.astype(np.float64) - sf[i].astype(np.float64)
            dists[i] += (diff**2).sum(axis=1) / width
    return dists


def _distance_matrix(synth, train, metric, embedder) -> np.ndarray:
    if metric == "L2":
        synth_flat = _flat_grids(synth)
        train_flat = _flat_grids(train)
        if synth_flat.shape[1] != train_flat.shape[1]:
            raise ConfigError("synthetic and training images differ in size")
        return np.stack([_l2_row(s, train_flat) for s in synth_flat])
    if metric == "LPIPS":
        if embedder is None:
            raise ConfigError("LPIPS metric requires a frozen feature embedder")
        return _lpips_rows(
            _unit_tap_features(embedder, synth), _unit_tap_features(embedder, train)
        )
    raise ConfigError(f"metric must be one of {NN_METRICS}, got {metric!r}")


def nearest_neighbors(synth, train, metric: str = "L2", embedder=None) -> list:
    """Exhaustive two-nearest search from each synthetic image into train."""
    synth, train = list(synth), list(train)
    if len(train) < 2:
        raise ConfigError("need at least 2 training images for a second-nearest distance")
    if not synth:
        raise ConfigError("empty synthetic set")
    dists = _distance_matrix(synth, train, metric, embedder)
    matches = []
    for i, row in enumerate(dists):
        nearest = int(np.argmin(row))
        two = np.partition(row, 1)[:2]
        matches.append(
            NNMatch(
                synth_id=i,
                nearest_train_id=nearest,
                d1=float(two.min()),
                d2=float(two.max()),
                metric=metric,
            )
        )
    return matches


def train_self_scale(train, metric: str = "L2", embedder=None) -> float:
    """Mean nearest-neighbor distance within the training set itself."""
    train = list(train)
    if len(train) < 2:
        raise ConfigError("need at least 2 training images")
    dists = _distance_matrix(train, train, metric, embedder)
    np.fill_diagonal(dists, np.inf)
    return float(dists.min(axis=1).mean())


@dataclass
class NNDRStats:
    mean_nndr: float
    min_nndr: float
    tau_copy: float
    copy_flags: list
    degenerate: list


def nndr_stats(matches, tau_copy: float) -> NNDRStats:
    """Nearest-neighbor distance ratios d1/d2 with copy flagging.

    A match with d1 below ``tau_copy`` (or exactly 0) is flagged as a
    potential copy; d2 == 0 marks a degenerate copy cluster (ratio set to 0).
    """
    matches = list(matches)
    if not matches:
        raise ConfigError("no matches to summarize")
    ratios, flags, degenerate = [], [], []
    for m in matches:
        if m.d2 == 0.0:
            ratios.append(0.0)
            degenerate.append(m.synth_id)
        else:
            ratios.append(m.d1 / m.d2)
        if m.d1 < tau_copy or m.d1 == 0.0:
            flags.append(m.synth_id)
    return NNDRStats(
        mean_nndr=float(np.mean(ratios)),
        min_nndr=float(np.min(ratios)),
        tau_copy=float(tau_copy),
        copy_flags=flags,
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# membership inference
# ---------------------------------------------------------------------------


def _noise_bank(shape: tuple, n_levels: int, repeats: int, seed: int) -> np.ndarray:
    """One noise draw per (level, repeat), shared across all scored images."""
    rng = np.random.default_rng(derive_seed(seed, "mia-noise"))
    return rng.standard_normal((n_levels, repeats) + shape).astype(np.float32)


def _check_protocol(t_levels, repeats, score_mode):
    if t_levels is None or len(tuple(t_levels)) == 0:
        raise ProtocolError("t_levels must be a non-empty sequence")
    if repeats < 1:
        raise ProtocolError("repeats must be >= 1")
    if score_mode not in SCORE_MODES:
        raise ProtocolError(f"score_mode must be one of {SCORE_MODES}")
    return tuple(t_levels)


def _cond_for(params: ModelParams, mask) -> Optional[torch.Tensor]:
    if mask is None:
        return None
    onehot = encode_mask_onehot(mask).onehot.astype(np.float32, copy=True)
    return torch.from_numpy(onehot)[None]


def _diffusion_errors(net, x0, cond, schedule, t_levels, repeats, bank, score_mode):
    errors = []
    x0_rep = x0.repeat(repeats, 1, 1, 1)
    cond_rep = None if cond is None else cond.repeat(repeats, 1, 1, 1)
    for li, t in enumerate(t_levels):
        t_arr = np.full(repeats, int(t))
        eps = torch.from_numpy(bank[li])
        x_t = forward_sample(x0_rep, t_arr, eps, schedule)
        with torch.no_grad():
            eps_hat = net(
                x_t.to(torch.float32),
                torch.from_numpy(t_arr.astype(np.float32)),
                cond_rep,
            )
        if score_mode == "denoise":
            errors.append(float(torch.mean((eps - eps_hat) ** 2)))
        else:
            ab = float(schedule.alpha_bar(int(t)))
            x0_hat = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
            errors.append(float(torch.mean((x0_hat - x0_rep) ** 2)))
    return errors


def _flow_errors(velocity, x1, cond, t_levels, repeats, bank, score_mode):
    errors = []
    x1_rep = x1.repeat(repeats, 1, 1, 1)
    cond_rep = None if cond is None else cond.repeat(repeats, 1, 1, 1)
    for li, t in enumerate(t_levels):
        if not 0.0 < float(t) < 1.0:
            raise ProtocolError(f"flow t levels must be in (0, 1), got {t}")
        x0 = torch.from_numpy(bank[li])
        t_arr = np.full(repeats, float(t))
        x_t = ot_interpolate(x0, x1_rep, t_arr)
        with torch.no_grad():
            v_hat = velocity(x_t.to(torch.float32), torch.from_numpy(t_arr.astype(np.float32)), cond_rep)
        if score_mode == "denoise":
            errors.append(float(torch.mean((v_hat - (x1_rep - x0)) ** 2)))
        else:
            x1_hat = x_t + (1.0 - float(t)) * v_hat
            errors.append(float(torch.mean((x1_hat - x1_rep) ** 2)))
    return errors


def mia_score(
    params: ModelParams,
    image,
    mask=None,
    schedule: Optional[NoiseSchedule] = None,
    t_levels=None,
    repeats: int = MIA_REPEATS,
    seed: int = 0,
    autoencoder: Optional[ModelParams] = None,
    score_mode: str = "denoise",
) -> float:
    """Membership score of one image under one generator (higher = member-like).

    Corrupts the image at each noise/time level with a seed-shared noise bank
    and accumulates the model's prediction error; the score is the negative
    mean error. Pixel and latent diffusion use the closed-form corruption and
    noise-prediction error (latent diffusion scores in the autoencoder's
    latent space); flow models use path interpolation and velocity-regression
    error. ``score_mode="reconstruct"`` switches to one-shot reconstruction
    error against the clean input.
    """
    role = params.meta.get("role", "")
    grid = _grid_of(image).astype(np.float32)

    if role in ("image_generator", "mask_generator"):
        if schedule is None:
            raise ConfigError("pixel diffusion scoring requires the noise schedule")
        t_levels = _check_protocol(
            DIFFUSION_T_LEVELS if t_levels is None else t_levels, repeats, score_mode
        )
        x0 = torch.from_numpy(grid)[None, None]
        cond = _cond_for(params, mask) if role == "image_generator" else None
        bank = _noise_bank((1,) + grid.shape, len(t_levels), repeats, seed)
        net = module_from_params(params)
        errors = _diffusion_errors(net, x0, cond, schedule, t_levels, repeats, bank, score_mode)
    elif role == "latent_image_generator":
        if schedule is None:
            raise ConfigError("latent diffusion scoring requires the noise schedule")
        if autoencoder is None:
            raise ConfigError("latent diffusion scoring requires the autoencoder")
        recorded = params.meta.get("ae_hash")
        if recorded != autoencoder.content_hash():
            raise ProvenanceError("autoencoder does not match the one this model was trained on")
        t_levels = _check_protocol(
            DIFFUSION_T_LEVELS if t_levels is None else t_levels, repeats, score_mode
        )
        from .core import Image as _Image

        z = ae_encode(autoencoder, _Image(grid=grid)) / float(params.meta["latent_scale"])
        x0 = torch.from_numpy(z.astype(np.float32))[None]
        cond = None
        if mask is not None:
            factor = grid.shape[-1] // z.shape[-1]
            onehot = encode_mask_onehot(mask).onehot
            pooled = pool_mask_to_latent(onehot, factor).astype(np.float32, copy=True)
            cond = torch.from_numpy(pooled)[None]
        bank = _noise_bank(z.shape, len(t_levels), repeats, seed)
        net = module_from_params(params)
        errors = _diffusion_errors(net, x0, cond, schedule, t_levels, repeats, bank, score_mode)
    elif role.startswith("flow"):
        t_levels = _check_protocol(
            FLOW_T_LEVELS if t_levels is None else t_levels, repeats, score_mode
        )
        x1 = torch.from_numpy(grid)[None, None]
        cond = _cond_for(params, mask)
        bank = _noise_bank((1,) + grid.shape, len(t_levels), repeats, seed)
        velocity = GridVelocity(module_from_params(params), int(params.meta["T"]))
        errors = _flow_errors(velocity, x1, cond, t_levels, repeats, bank, score_mode)
    else:
        raise ConfigError(f"no membership protocol for model role {role!r}")
    return -float(np.mean(errors))


def roc_auc(member_scores, nonmember_scores) -> float:
    """Probability a random member outscores a random nonmember, ties as 1/2."""
    members = np.asarray(list(member_scores), dtype=np.float64)
    nonmembers = np.asarray(list(nonmember_scores), dtype=np.float64)
    if members.size == 0 or nonmembers.size == 0:
        raise EmptyGroupError("both score groups must be non-empty")
    ranks = rankdata(np.concatenate([members, nonmembers]))
    u = ranks[: members.size].sum() - members.size * (members.size + 1) / 2.0
    return float(u / (members.size * nonmembers.size))


@dataclass
class MIAResult:
    member_scores: list
    nonmember_scores: list
    auc: float
    protocol: dict


def run_mia(
    params: ModelParams,
    member_items,
    nonmember_items,
    schedule: Optional[NoiseSchedule] = None,
    t_levels=None,
    repeats: int = MIA_REPEATS,
    seed: int = 0,
    autoencoder: Optional[ModelParams] = None,
    score_mode: str = "denoise",
) -> MIAResult:
    """Score both groups under one identical protocol and report the AUC."""

    def scores(items):
        return [
            mia_score(
                params,
                it.image,
                mask=it.mask,
                schedule=schedule,
                t_levels=t_levels,
                repeats=repeats,
                seed=seed,
                autoencoder=autoencoder,
                score_mode=score_mode,
            )
            for it in items
        ]

    member_scores = scores(member_items)
    nonmember_scores = scores(nonmember_items)
    role = params.meta.get("role", "")
    resolved = t_levels or (
        FLOW_T_LEVELS if role.startswith("flow") else DIFFUSION_T_LEVELS
    )
    return MIAResult(
        member_scores=member_scores,
        nonmember_scores=nonmember_scores,
        auc=roc_auc(member_scores, nonmember_scores),
        protocol={
            "t_levels": tuple(resolved),
            "repeats": repeats,
            "seed": seed,
            "score_mode": score_mode,
            "role": role,
        },
    )


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class PrivacyRow:
    generator: str
    n_synth: int
    l2_d1_mean: float
    lpips_d1_mean: float
    nndr_mean: float
    nndr_min: float
    mia_auc: float
    copy_flags: list
    reference: dict = field(default_factory=dict)


@dataclass
class PrivacyReport:
    rows: list
    tau_copy: float

    def row(self, generator: str) -> PrivacyRow:
        for r in self.rows:
            if r.generator == generator:
                return r
        raise KeyError(f"no row for generator {generator!r}")

    def to_rows(self) -> list:
        return [
            {
                "generator": r.generator,
                "n_synth": r.n_synth,
                "l2_d1_mean": r.l2_d1_mean,
                "lpips_d1_mean": r.lpips_d1_mean,
                "nndr_mean": r.nndr_mean,
                "nndr_min": r.nndr_min,
                "mia_auc": r.mia_auc,
                "n_copy_flags": len(r.copy_flags),
                "reference_mia_auc": r.reference.get("mia_auc"),
                "reference_nndr": r.reference.get("nndr"),
            }
            for r in self.rows
        ]


def _item_keys(items) -> set:
    return {(it.domain, it.subject_id) for it in items}


def privacy_report(
    generators: dict,
    train_items,
    holdout_items,
    synth_sets: dict,
    embedder: Optional[FeatureEmbedder] = None,
    seed: int = 0,
    mia_members: Optional[int] = None,
    mia_repeats: int = MIA_REPEATS,
) -> PrivacyReport:
    """One privacy row per generator.

    ``generators`` maps a generator name to a dict with ``params`` and,
    where the protocol needs them, ``schedule`` and ``autoencoder``; a
    bundle may also carry ``t_levels`` to override the corruption levels
    (required when a diffusion schedule is shorter than the defaults).
    ``synth_sets`` maps the same names to generated image lists. Training
    items are the members and holdout items the nonmembers of the attack
    (capped at ``mia_members`` per group when set).
    """
    train_items = list(train_items)
    holdout_items = list(holdout_items)
    overlap = _item_keys(train_items) & _item_keys(holdout_items)
    if overlap:
        raise SplitLeakError(
            f"holdout shares {len(overlap)} subjects with the training set: "
            f"{sorted(overlap)[:5]}"
        )
    missing = set(synth_sets) - set(generators)
    if missing or set(generators) - set(synth_sets):
        raise ConfigError("generators and synth_sets must have identical keys")

    train_images = [it.image for it in train_items]
    tau_copy = COPY_TAU_FRACTION * train_self_scale(train_images, "L2")

    cap = mia_members if mia_members is not None else min(len(train_items), len(holdout_items))
    members = train_items[:cap]
    nonmembers = holdout_items[:cap]

    rows = []
    for name in sorted(generators):
        bundle = generators[name]
        synth = list(synth_sets[name])
        l2_matches = nearest_neighbors(synth, train_images, "L2")
        nndr = nndr_stats(l2_matches, tau_copy)
        if embedder is not None:
            lpips_matches = nearest_neighbors(synth, train_images, "LPIPS", embedder)
            lpips_d1 = float(np.mean([m.d1 for m in lpips_matches]))
        else:
            lpips_d1 = float("nan")
        mia = run_mia(
            bundle["params"],
            members,
            nonmembers,
            schedule=bundle.get("schedule"),
            t_levels=bundle.get("t_levels"),
            repeats=mia_repeats,
            seed=seed,
            autoencoder=bundle.get("autoencoder"),
        )
        rows.append(
            PrivacyRow(
                generator=name,
                n_synth=len(synth),
                l2_d1_mean=float(np.mean([m.d1 for m in l2_matches])),
                lpips_d1_mean=lpips_d1,
                nndr_mean=nndr.mean_nndr,
                nndr_min=nndr.min_nndr,
                mia_auc=mia.auc,
                copy_flags=nndr.copy_flags,
                reference=FULL_SCALE_ANCHORS.get(name, {}),
            )
        )
    return PrivacyReport(rows=rows, tau_copy=tau_copy)
