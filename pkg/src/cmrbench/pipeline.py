"""Stage orchestration for benchmark runs.

Each stage reads its inputs from the run directory and writes its outputs
back there, so any stage can be re-run in isolation and a crashed run
resumes from its last completed stage. Layout under the run directory:

    resolved_config.json     defaults-applied config + hash
    data/                    phantom dataset (dataio format)
    checkpoints/*.ckpt       every trained model
    samples/<generator>/     synthetic datasets (dataio format)
    samples/denoising.npz    reverse-trajectory snapshots for the figure
    evaluation/<axis>.json   per-axis MetricReport fragments
    report/                  merged CSV/JSON + figures + manifest

Per-stage random seeds are derived from the config's master seed with a
stable stage label, never from global state. Independent per-generator and
per-setup evaluation jobs can run on a small thread pool (``workers``);
training always runs sequentially because network init draws from the
process-global torch generator.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backbone import ModelParams, encode_mask_onehot, module_from_params
from .checkpoint import load_checkpoint, save_checkpoint
from .config import GENERATOR_NAMES, ExperimentConfig, write_resolved
from .core import Dataset, DatasetItem, Image, derive_seed
from .dataio import load_dataset, save_dataset
from .ddpm import decode_mask, make_schedule, sample_loop, train
from .errors import ConfigError, StageError
from .fidelity import FeatureEmbedder, embed_features, fid, kid, lpips, train_embedder
from .flowmatch import GridVelocity, ODESolverConfig, sample_flow, train_flow
from .ldm import pool_mask_to_latent, train_autoencoder, train_latent_diffusion, vq_quantize
from .maskshape import PlausibilityReport, PlausibilityRow, plausibility_report
from .phantom import build_dataset
from .privacy import privacy_report
from .report import MetricReport, emit_report
from .segutil import TrainingSetup, evaluate_cross, train_segmenter

EVAL_AXES = ("fidelity", "shape", "utility", "privacy")

# checkpoint file stems, one per trained model
CKPT_MASK = "mask_ddpm"
CKPT_IMAGE = {"ddpm": "image_ddpm", "ldm": "latent_ddpm", "fm": "flow"}
CKPT_AE = "autoencoder"
CKPT_EMBEDDER = "embedder"


class RunPaths:
    """All file locations of one run, derived from its root directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.data = self.root / "data"
        self.checkpoints = self.root / "checkpoints"
        self.samples = self.root / "samples"
        self.evaluation = self.root / "evaluation"
        self.report = self.root / "report"
        self.resolved_config = self.root / "resolved_config.json"

    def checkpoint(self, stem: str) -> Path:
        return self.checkpoints / f"{stem}.ckpt"

    def sample_dir(self, name: str) -> Path:
        return self.samples / name

    def eval_json(self, axis: str) -> Path:
        return self.evaluation / f"{axis}.json"


def _generator_of(setup_name: str) -> str:
    """Report-row generator key for a training setup ('real' for RealA/RealB)."""
    return setup_name.split("-", 1)[1] if "-" in setup_name else "real"


def _diffusion_t_levels(schedule) -> tuple:
    """Corruption steps at 10/30/50% of the schedule (100/300/500 at T=1000)."""
    return tuple(
        sorted({max(1, schedule.T // 10), max(1, 3 * schedule.T // 10), max(1, schedule.T // 2)})
    )


class Pipeline:
    def __init__(self, config: ExperimentConfig, out_dir=None, workers: int = 1):
        self.config = config
        self.paths = RunPaths(out_dir if out_dir is not None else config.out_dir)
        self.workers = max(1, int(workers))
        self._cached_dataset: Optional[Dataset] = None

    # --- shared helpers ----------------------------------------------------

    def _seed(self, label: str) -> int:
        return derive_seed(self.config.seed, label)

    def _map(self, fn, items: list) -> list:
        """Run independent jobs, optionally on a thread pool, in input order."""
        items = list(items)
        if self.workers == 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    def _save(self, result_params: ModelParams, stem: str, stage: str) -> ModelParams:
        result_params.meta.update({"stage": stage, "run_config_hash": self.config.hash()})
        save_checkpoint(result_params, self.paths.checkpoint(stem))
        return result_params

    def _load(self, stem: str, needed_by: str) -> ModelParams:
        path = self.paths.checkpoint(stem)
        if not path.is_file():
            raise StageError(f"{needed_by} needs checkpoint {path.name}; run its training stage first")
        return load_checkpoint(path)

    def dataset(self) -> Dataset:
        if self._cached_dataset is None:
            if not (self.paths.data / "manifest.json").is_file():
                raise StageError(f"no dataset under {self.paths.data}; run gen-data first")
            self._cached_dataset = load_dataset(self.paths.data)
        return self._cached_dataset

    def _train_items(self, domain: str) -> list:
        items = self.dataset().domain(domain).split("train")
        if not items:
            raise StageError(f"dataset has no domain-{domain} training items")
        return items

    def _n_synth_full(self) -> int:
        """FullSyn sets are size-matched to the real training set."""
        return max(self.config.evaluation.n_synth, len(self._train_items("A")))

    def _ddpm_schedule(self):
        c = self.config.ddpm
        return make_schedule(c.T, c.beta_start, c.beta_end)

    def _ldm_schedule(self):
        c = self.config.ldm.diffusion
        return make_schedule(c.T, c.beta_start, c.beta_end)

    # --- data and training stages -------------------------------------------

    def gen_data(self) -> Dataset:
        cfg = self.config
        dataset = build_dataset(cfg.data.to_phantom_config(seed=cfg.seed))
        dataset.validate()
        write_resolved(cfg, self.paths.resolved_config)
        save_dataset(dataset, self.paths.data)
        self._cached_dataset = dataset
        return dataset

    def train_mask(self) -> ModelParams:
        cfg = replace(self.config.ddpm, seed=self._seed("train:mask"))
        result = train("mask_generator", self.dataset().domain("A"), cfg)
        return self._save(result.params, CKPT_MASK, "train-mask")

    def train_image(self, kind: str) -> ModelParams:
        if kind not in GENERATOR_NAMES:
            raise ConfigError(f"unknown generator {kind!r}, expected one of {GENERATOR_NAMES}")
        domain_a = self.dataset().domain("A")
        if kind == "ddpm":
            cfg = replace(self.config.ddpm, seed=self._seed("train:ddpm"))
            result = train("image_generator", domain_a, cfg)
            return self._save(result.params, CKPT_IMAGE["ddpm"], "train-image ddpm")
        if kind == "fm":
            cfg = replace(self.config.fm, seed=self._seed("train:fm"))
            result = train_flow(domain_a, cfg)
            return self._save(result.params, CKPT_IMAGE["fm"], "train-image fm")
        ae_cfg = replace(self.config.ldm.autoencoder, seed=self._seed("train:ae"))
        ae_result = train_autoencoder(domain_a, ae_cfg)
        self._save(ae_result.params, CKPT_AE, "train-image ldm")
        ld_cfg = replace(self.config.ldm.diffusion, seed=self._seed("train:ldm"))
        result = train_latent_diffusion(ae_result.params, domain_a, ld_cfg)
        return self._save(result.params, CKPT_IMAGE["ldm"], "train-image ldm")

    def _embedder(self) -> FeatureEmbedder:
        path = self.paths.checkpoint(CKPT_EMBEDDER)
        if path.is_file():
            return FeatureEmbedder(params=load_checkpoint(path))
        cfg = replace(self.config.embedder, seed=self._seed("train:embedder"))
        embedder = train_embedder(self.dataset(), cfg)
        self._save(embedder.params, CKPT_EMBEDDER, "eval-fidelity")
        return embedder

    # --- sampling -------------------------------------------------------------

    def _sample_masks(self, mask_params: ModelParams, n: int, seed: int) -> list:
        net = module_from_params(mask_params)
        schedule = self._ddpm_schedule()
        rng = np.random.default_rng(seed)
        size = self.config.data.resolution
        batch = self.config.evaluation.sample_batch
        masks = []
        for start in range(0, n, batch):
            b = min(batch, n - start)
            x = sample_loop(net, None, schedule, rng, shape=(b, 4, size, size))
            masks += [decode_mask(x[i]) for i in range(b)]
        return masks

    def _sample_images(self, kind: str, masks: list, seed: int) -> list:
        rng = np.random.default_rng(seed)
        size = self.config.data.resolution
        batch = self.config.evaluation.sample_batch
        grids = []
        if kind == "ldm":
            ae_params = self._load(CKPT_AE, "sample")
            diff_params = self._load(CKPT_IMAGE["ldm"], "sample")
            ae = module_from_params(ae_params)
            net = module_from_params(diff_params)
            factor = ae.spec.factor
            scale = float(diff_params.meta["latent_scale"])
            schedule = self._ldm_schedule()
            for start in range(0, len(masks), batch):
                chunk = masks[start : start + batch]
                cond = np.stack(
                    [pool_mask_to_latent(encode_mask_onehot(m).onehot, factor) for m in chunk]
                )
                z = sample_loop(
                    net,
                    cond,
                    schedule,
                    rng,
                    shape=(len(chunk), ae.spec.latent_channels, size // factor, size // factor),
                )
                zt = torch.from_numpy(z * scale).to(torch.float32)
                with torch.no_grad():
                    z_q, _, _, _ = vq_quantize(zt, ae.codebook)
                    x = ae.decode(z_q)
                grids.append(x[:, 0].numpy())
        else:
            if kind == "ddpm":
                params = self._load(CKPT_IMAGE["ddpm"], "sample")
                net = module_from_params(params)
                schedule = self._ddpm_schedule()
            else:
                params = self._load(CKPT_IMAGE["fm"], "sample")
                net = GridVelocity(module_from_params(params), int(params.meta["T"]))
                solver = ODESolverConfig(steps=self.config.evaluation.solver_steps)
            for start in range(0, len(masks), batch):
                chunk = masks[start : start + batch]
                cond = np.stack([encode_mask_onehot(m).onehot for m in chunk])
                shape = (len(chunk), 1, size, size)
                if kind == "ddpm":
                    x = sample_loop(net, cond, schedule, rng, shape=shape)
                else:
                    x = sample_flow(net, cond, solver, rng, shape=shape)
                grids.append(x[:, 0])
        flat = np.clip(np.concatenate(grids), -1.0, 1.0)
        return [
            Image(grid=flat[i], spacing=masks[i].spacing, intensity_range=(-1.0, 1.0))
            for i in range(len(masks))
        ]

    def _save_synth(self, name: str, masks: list, images: list) -> Path:
        items = [
            DatasetItem(image=img, mask=msk, subject_id=i, domain=f"synth-{name}", split="train")
            for i, (img, msk) in enumerate(zip(images, masks))
        ]
        provenance = {"run_config_hash": self.config.hash(), "set": name}
        return save_dataset(Dataset(items=items, provenance=provenance), self.paths.sample_dir(name))

    def _trained_generators(self) -> list:
        return [g for g in GENERATOR_NAMES if self.paths.checkpoint(CKPT_IMAGE[g]).is_file()]

    def sample(self) -> dict:
        """Generate every evaluation set the configured stages will need."""
        mask_params = self._load(CKPT_MASK, "sample")
        generators = self._trained_generators()
        if not generators:
            raise StageError("no trained image generators found; run train-image first")
        n_full = self._n_synth_full()
        made = {}

        def one_generator(gen: str) -> tuple:
            masks = self._sample_masks(mask_params, n_full, self._seed(f"sample:masks:{gen}"))
            images = self._sample_images(gen, masks, self._seed(f"sample:images:{gen}"))
            return gen, self._save_synth(gen, masks, images)

        for gen, path in self._map(one_generator, generators):
            made[gen] = path

        # real-mask-conditioned variants for any configured ASyn/BSyn setups
        for setup_name in self.config.evaluation.utility_setups:
            setup = TrainingSetup(setup_name)
            if not setup_name.startswith(("ASyn", "BSyn")):
                continue
            gen = setup_name.split("-", 1)[1]
            if gen not in generators:
                raise StageError(f"setup {setup_name} needs a trained {gen} generator")
            domain = "A" if setup_name.startswith("ASyn") else "B"
            real_masks = [it.mask for it in self._train_items(domain)]
            images = self._sample_images(gen, real_masks, self._seed(f"sample:{setup_name}"))
            made[setup_name] = self._save_synth(setup_name, real_masks, images)

        if "ddpm" in generators:
            interval = self.config.evaluation.record_every
            net = module_from_params(self._load(CKPT_IMAGE["ddpm"], "sample"))
            schedule = self._ddpm_schedule()
            rng = np.random.default_rng(self._seed("sample:strip"))
            strip_mask = load_dataset(self.paths.sample_dir("ddpm")).items[0].mask
            cond = encode_mask_onehot(strip_mask).onehot
            size = self.config.data.resolution
            _, snaps = sample_loop(
                net, cond, schedule, rng, shape=(1, 1, size, size), record_every=interval
            )
            np.savez(
                self.paths.samples / "denoising.npz",
                interval=interval,
                total_steps=schedule.T,
                **{f"snap{i:03d}": s for i, s in enumerate(snaps)},
            )
        return made

    def _synth_items(self, name: str, needed_by: str) -> list:
        path = self.paths.sample_dir(name)
        if not (path / "manifest.json").is_file():
            raise StageError(f"{needed_by} needs synthetic set {name!r}; run sample first")
        return load_dataset(path).items

    # --- evaluation stages ------------------------------------------------------

    def _fragment(self, axis: str) -> MetricReport:
        return MetricReport({"config_hash": self.config.hash(), "axis": axis})

    def eval_fidelity(self) -> MetricReport:
        eval_cfg = self.config.evaluation
        embedder = self._embedder()
        real = [it.image for it in self.dataset().domain("A").split("test")]
        if len(real) < 2:
            raise StageError("fidelity needs at least 2 domain-A test images")
        real_features = embed_features(embedder, real)
        report = self._fragment("fidelity")

        def one(gen: str):
            items = self._synth_items(gen, "eval-fidelity")[: eval_cfg.n_synth]
            synth_features = embed_features(embedder, [it.image for it in items])
            kid_mean, kid_std = kid(
                real_features,
                synth_features,
                subsets=eval_cfg.kid_subsets,
                subset_size=min(eval_cfg.kid_subset_size, len(real), len(items)),
                seed=self._seed(f"eval:kid:{gen}"),
            )
            return gen, fid(real_features, synth_features), kid_mean, kid_std

        for gen, fid_v, kid_mean, kid_std in self._map(one, self._trained_generators()):
            report.add("fidelity", gen, "", "fid", fid_v)
            report.add("fidelity", gen, "", "kid", kid_mean, uncertainty=kid_std)
        report.provenance["embedder_hash"] = embedder.frozen_hash
        report.save_json(self.paths.eval_json("fidelity"))
        return report

    def eval_shape(self) -> MetricReport:
        real_masks = [it.mask for it in self._train_items("A")]
        report = self._fragment("shape")
        for gen in self._trained_generators():
            synth_masks = [it.mask for it in self._synth_items(gen, "eval-shape")]
            plaus = plausibility_report(real_masks, synth_masks)
            report.add("shape", gen, "", "violation_fraction", plaus.violation_fraction)
            report.add("shape", gen, "", "flagged_fraction", len(plaus.flagged_rows()) / len(plaus.rows))
            report.add("shape", gen, "", "ks_d_mean", float(np.mean([r.d for r in plaus.rows])))
            payload = {
                "rows": plaus.to_rows(),
                "summaries": plaus.summaries,
                "fragment_counts": plaus.fragment_counts,
                "violation_fraction": plaus.violation_fraction,
                "n_real": plaus.n_real,
                "n_generated": plaus.n_generated,
            }
            self.paths.evaluation.mkdir(parents=True, exist_ok=True)
            (self.paths.evaluation / f"shape_{gen}.json").write_text(
                json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8"
            )
        report.save_json(self.paths.eval_json("shape"))
        return report

    def _setup_items(self, setup_name: str, size_match: int) -> list:
        if setup_name == "RealA":
            return self._train_items("A")
        if setup_name == "RealB":
            return self._train_items("B")
        if setup_name.startswith("FullSyn"):
            gen = setup_name.split("-", 1)[1]
            return self._synth_items(gen, "eval-utility")[:size_match]
        return self._synth_items(setup_name, "eval-utility")[:size_match]

    def eval_utility(self) -> MetricReport:
        size_match = len(self._train_items("A"))
        seg_cfg = self.config.segmenter
        models = {}
        for setup_name in self.config.evaluation.utility_setups:
            setup = TrainingSetup(setup_name)
            items = self._setup_items(setup_name, size_match)
            cfg = replace(seg_cfg, seed=self._seed(f"train:seg:{setup_name}"))
            result = train_segmenter(setup, items, cfg)
            models[setup_name] = self._save(
                result.params, f"seg_{setup_name}", "eval-utility"
            )
        dataset = self.dataset()
        test_sets = {
            dom: dataset.domain(dom).split("test")
            for dom in sorted({it.domain for it in dataset.items})
        }
        grid = evaluate_cross(models, test_sets)
        report = self._fragment("utility")
        for row in grid.rows:
            generator = _generator_of(row.setup)
            setup_key = f"{row.setup}:test{row.test_domain}"
            for metric in ("dice", "iou", "hd95", "asd"):
                value = getattr(row, metric)
                report.add(
                    "utility",
                    generator,
                    setup_key,
                    f"{metric}_mean",
                    float("nan") if value is None else value,
                )
            for cls, stats in row.per_class.items():
                if stats.get("dice") is not None:
                    report.add("utility", generator, setup_key, f"dice_{cls}", stats["dice"])
            report.add("utility", generator, setup_key, "undefined_count", row.undefined_count)
        report.save_json(self.paths.eval_json("utility"))
        return report

    def eval_privacy(self) -> MetricReport:
        eval_cfg = self.config.evaluation
        train_items = self._train_items("A")
        holdout_items = self.dataset().domain("A").split("test")
        generators = {}
        synth_sets = {}
        for gen in self._trained_generators():
            bundle = {"params": self._load(CKPT_IMAGE[gen], "eval-privacy")}
            if gen == "ddpm":
                bundle["schedule"] = self._ddpm_schedule()
                bundle["t_levels"] = _diffusion_t_levels(bundle["schedule"])
            elif gen == "ldm":
                bundle["schedule"] = self._ldm_schedule()
                bundle["t_levels"] = _diffusion_t_levels(bundle["schedule"])
                bundle["autoencoder"] = self._load(CKPT_AE, "eval-privacy")
            generators[gen] = bundle
            items = self._synth_items(gen, "eval-privacy")[: eval_cfg.n_synth]
            synth_sets[gen] = [it.image for it in items]
        if not generators:
            raise StageError("eval-privacy found no trained generators")
        priv = privacy_report(
            generators,
            train_items,
            holdout_items,
            synth_sets,
            embedder=self._embedder(),
            seed=self._seed("eval:privacy"),
            mia_members=eval_cfg.mia_members,
            mia_repeats=eval_cfg.mia_repeats,
        )
        report = self._fragment("privacy")
        for row in priv.rows:
            report.add("privacy", row.generator, "", "nndr_mean", row.nndr_mean)
            report.add("privacy", row.generator, "", "nndr_min", row.nndr_min)
            report.add("privacy", row.generator, "", "mia_auc", row.mia_auc)
            report.add("privacy", row.generator, "", "n_copy_flags", len(row.copy_flags))
            report.add("privacy", row.generator, "", "l2_d1_mean", row.l2_d1_mean)
            report.add("privacy", row.generator, "", "lpips_d1_mean", row.lpips_d1_mean)
        report.provenance["tau_copy"] = priv.tau_copy
        report.save_json(self.paths.eval_json("privacy"))
        return report

    # --- report ------------------------------------------------------------------

    def _merged_report(self) -> MetricReport:
        merged = MetricReport({"config_hash": self.config.hash()})
        found = False
        for axis in EVAL_AXES:
            path = self.paths.eval_json(axis)
            if not path.is_file():
                continue
            found = True
            fragment = MetricReport.load_json(path)
            for row in fragment.rows:
                merged.add(row.axis, row.generator, row.setup, row.metric, row.value, row.uncertainty)
        if not found:
            raise StageError("no evaluation fragments found; run the eval stages first")
        return merged

    def _figures_payload(self) -> dict:
        payload = {}
        samples = {}
        for gen in GENERATOR_NAMES:
            path = self.paths.sample_dir(gen)
            if not (path / "manifest.json").is_file():
                continue
            items = load_dataset(path).items[:6]
            samples[gen] = {
                "masks": [it.mask for it in items],
                "images": [it.image for it in items],
            }
        if samples:
            payload["samples"] = samples
        strip_path = self.paths.samples / "denoising.npz"
        if strip_path.is_file():
            with np.load(strip_path) as data:
                snaps = [data[k] for k in sorted(k for k in data.files if k.startswith("snap"))]
                payload["denoising"] = {
                    "snapshots": snaps,
                    "interval": int(data["interval"]),
                    "total_steps": int(data["total_steps"]),
                    "generator": "ddpm",
                }
        shapes = {}
        for gen in GENERATOR_NAMES:
            path = self.paths.evaluation / f"shape_{gen}.json"
            if not path.is_file():
                continue
            blob = json.loads(path.read_text(encoding="utf-8"))
            shapes[gen] = PlausibilityReport(
                rows=[PlausibilityRow(**row) for row in blob["rows"]],
                violation_fraction=blob["violation_fraction"],
                fragment_counts=blob["fragment_counts"],
                summaries=blob["summaries"],
                n_real=blob["n_real"],
                n_generated=blob["n_generated"],
            )
        if shapes:
            payload["shape"] = shapes
        return payload

    def report(self) -> dict:
        merged = self._merged_report()
        return emit_report(merged, self.paths.report, self._figures_payload())

    # --- full run -------------------------------------------------------------------

    def run_all(self) -> dict:
        toggles = self.config.evaluation
        self.gen_data()
        self.train_mask()
        for gen in GENERATOR_NAMES:
            self.train_image(gen)
        self.sample()
        if toggles.fidelity:
            self.eval_fidelity()
        if toggles.shape:
            self.eval_shape()
        if toggles.utility:
            self.eval_utility()
        if toggles.privacy:
            self.eval_privacy()
        return self.report()
