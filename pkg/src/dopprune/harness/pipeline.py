"""End-to-end pruning experiments.

One run covers every (sparsity, seed) cell of a config. For each cell:
build the pruning materials for the configured mode, score the freshly
initialised network on them, keep the top-kappa weights, fine-tune the
masked network on the training split and evaluate on the test split.

The reference classifier and the concept patch store are cached on disk
under keys derived from the settings that produce them, so runs that differ
only in criterion, mode or sparsity share them.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
import traceback
from dataclasses import asdict
from functools import cached_property
from pathlib import Path

import numpy as np

from ..autodiff import LabeledBatch
from ..datasets import (
    LabeledImageSet,
    all_one_batch,
    augment,
    from_idx,
    generate_shapes,
    random_segments,
)
from ..model_zoo import (
    Classifier,
    Mask,
    build_network,
    init_params,
    load_params,
    save_mask,
    save_params,
)
from ..pruning import (
    SparsityTarget,
    accuracy,
    compute_scores,
    finetune,
    layer_stats,
    top_kappa_mask,
)
from ..stitching import build_stitch_set
from ..store import PatchStore
from .config import ExperimentConfig
from .report import RunReport

log = logging.getLogger(__name__)


class ReferenceTooWeak(RuntimeError):
    pass


class CellError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(name: str, seed: int) -> int:
    """Independent, reproducible seed for one named random stream."""
    digest = hashlib.sha256(f"{name}/{int(seed)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _quotas(total: int, classes: int) -> list[int]:
    return [total // classes + (1 if k < total % classes else 0) for k in range(classes)]


class Pipeline:
    """Lazily built stages of one experiment config."""

    def __init__(self, config: ExperimentConfig):
        config.check_artifacts()
        self.config = config
        self.out = Path(config.out)
        self.cache = config.cache_dir

    # -- data and models ----------------------------------------------------

    @cached_property
    def splits(self) -> tuple[LabeledImageSet, LabeledImageSet]:
        d = self.config.dataset
        if d.get("kind", "synthetic") == "synthetic":
            ds = generate_shapes(self.config.synthetic_spec())
            return ds.train, ds.test
        classes = d.get("classes")
        train = from_idx(d["train_images"], d["train_labels"], classes, "train")
        test = from_idx(d["test_images"], d["test_labels"], train.classes, "test", mean=train.mean)
        return train, test

    @property
    def train(self) -> LabeledImageSet:
        return self.splits[0]

    @property
    def test(self) -> LabeledImageSet:
        return self.splits[1]

    @cached_property
    def dataset_id(self) -> str:
        d = self.config.dataset
        if d.get("kind", "synthetic") == "synthetic":
            return f"synthetic:{self.config.synthetic_spec().digest()}"
        h = hashlib.sha256()
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            h.update(Path(d[key]).read_bytes())
        return f"idx:{h.hexdigest()[:16]}"

    @cached_property
    def spec(self):
        return build_network(self.config.model, self.train.image_shape, self.train.classes)

    def _ref_key(self) -> str:
        return _hash({"dataset": self.dataset_id, "model": self.config.model,
                      "reference": asdict(self.config.reference)})

    def reference_path(self) -> Path:
        return self.cache / f"reference-{self._ref_key()}"

    def reference(self) -> tuple:
        """Dense classifier F (trained once per dataset/model/schedule) and its test accuracy."""
        d = self.reference_path()
        cfg = self.config.reference
        if (d / "params.plab").is_file():
            params = load_params(d / "params.plab")
            acc = json.loads((d / "meta.json").read_text())["test_accuracy"]
        else:
            log.info("training reference classifier (%d epochs)", cfg.epochs)
            start = init_params(self.spec, derive_seed("reference-init", cfg.seed))
            params = finetune(self.spec, start, Mask.ones_like(start), self.train.centered(),
                              self.train.labels, cfg.schedule(), seed=derive_seed("reference-train", cfg.seed))
            acc = accuracy(self.spec, params, self.test.centered(), self.test.labels)
            d.mkdir(parents=True, exist_ok=True)
            save_params(d / "params.plab", params)
            (d / "meta.json").write_text(json.dumps({"test_accuracy": acc, "dataset": self.dataset_id},
                                                    sort_keys=True, indent=2))
        if acc < cfg.min_accuracy:
            raise ReferenceTooWeak(f"reference accuracy {acc:.4f} below floor {cfg.min_accuracy}")
        return params, acc

    def classifier(self) -> Classifier:
        return Classifier(self.spec, self.reference()[0], self.train.mean)

    def store_path(self) -> Path:
        key = _hash({"reference": self._ref_key(), "extract": asdict(self.config.extract)})
        return self.cache / f"dop-{key}"

    def dop_store(self) -> PatchStore:
        d = self.store_path()
        if (d / "store.json").is_file():
            return PatchStore.load(d)
        from ..concepts.extract import extract_discriminative_patches

        log.info("extracting discriminative patches")
        result = extract_discriminative_patches(self.classifier(), self.train, self.config.extract)
        result.store.save(d)
        return result.store

    def stitch_store(self, seed: int, quotas: list[int] | None = None) -> PatchStore:
        store = self.dop_store()
        quotas = quotas or _quotas(self.config.material_budget, self.train.classes)
        parts = [build_stitch_set(store, self.config.sigma, q, derive_seed("stitch", seed), classes=[k])
                 for k, q in enumerate(quotas) if q > 0]
        images = np.concatenate([p.images for p in parts])
        masks = np.concatenate([p.masks for p in parts])
        labels = np.concatenate([p.labels for p in parts])
        records = tuple(r for p in parts for r in p.records)
        return PatchStore(images, masks, labels, records, store.mean, "stitched",
                          {"sigma": self.config.sigma})

    # -- one cell -------------------------------------------------------------

    def materials(self, seed: int) -> LabeledBatch:
        """Network-ready pruning batch for ``seed`` under the configured mode."""
        cfg = self.config
        mode = cfg.mode
        classes = self.train.classes
        rng = np.random.default_rng(derive_seed("materials", seed))
        quotas = _quotas(cfg.material_budget, classes)
        mean = self.train.mean

        if mode in ("random-image", "all-one"):
            idx = np.concatenate([rng.choice(self.train.of_class(k), q, replace=False)
                                  for k, q in enumerate(quotas) if q > 0])
            if mode == "all-one":
                # ones are fed as they are: no centering, no augmentation
                return all_one_batch(self.train.image_shape, self.train.labels[idx])
            images, labels = self.train.images[idx], self.train.labels[idx]
        elif mode == "dop":
            store = self.dop_store()
            idx = self._round_robin(store, quotas, rng)
            images, labels = store.images[idx], store.labels[idx]
        elif mode == "less-patch":
            store = self.dop_store()
            idx = np.array([rng.choice(store.select(**{"class": k})) for k in store.classes_present])
            images, labels = store.images[idx], store.labels[idx]
        elif mode == "stitch":
            store = self.stitch_store(seed, quotas)
            images, labels = store.images, store.labels
        elif mode == "random-segment":
            store = random_segments(self.train, cfg.material_budget, derive_seed("segments", seed),
                                    cfg.extract.scales, cfg.extract.compactness, cfg.extract.min_pixels)
            images, labels = store.images, store.labels
        else:  # guarded by config validation
            raise ValueError(mode)
        x = augment(images - mean, np.random.default_rng(derive_seed("augment", seed)))
        return LabeledBatch(x, labels)

    @staticmethod
    def _round_robin(store: PatchStore, quotas: list[int], rng) -> np.ndarray:
        """Distinct patches per class, cycling through concepts in rank order."""
        picked = []
        for k, quota in enumerate(quotas):
            if quota == 0:
                continue
            rows = store.select(**{"class": k})
            if len(rows) < quota:
                raise ValueError(f"class {k} has {len(rows)} patches, budget needs {quota}")
            by_concept: dict[int, list[int]] = {}
            for i in rows:
                by_concept.setdefault(store.records[i]["concept"], []).append(int(i))
            queues = [list(rng.permutation(by_concept[p])) for p in sorted(by_concept)]
            taken = 0
            while taken < quota:
                for q in queues:
                    if q and taken < quota:
                        picked.append(q.pop(0))
                        taken += 1
        return np.array(picked, dtype=np.int64)

    def init(self, seed: int):
        return init_params(self.spec, derive_seed("init", seed))

    def prune(self, sparsity: float, seed: int, timing: dict | None = None) -> Mask:
        params = self.init(seed)
        total = params.n_weights
        if sparsity == 0:
            return Mask.ones_like(params)
        t = time.perf_counter()
        batch = self.materials(seed)
        if timing is not None:
            timing["materials"] = time.perf_counter() - t
            t = time.perf_counter()
        scores = compute_scores(self.config.criterion, self.spec, params, [batch])
        mask = top_kappa_mask(scores, SparsityTarget(total=total, sparsity=sparsity), like=params)
        if timing is not None:
            timing["score"] = time.perf_counter() - t
        self._last_materials = len(batch)
        return mask

    def train_masked(self, mask: Mask, seed: int):
        return finetune(self.spec, self.init(seed), mask, self.train.centered(), self.train.labels,
                        self.config.train, seed=derive_seed("train", seed))

    def evaluate(self, params) -> float:
        return accuracy(self.spec, params, self.test.centered(), self.test.labels)

    def run_cell(self, sparsity: float, seed: int) -> tuple[dict, dict]:
        cfg = self.config
        row = {"config_hash": cfg.digest(), "dataset": self.dataset_id, "model": cfg.model,
               "criterion": cfg.criterion, "mode": cfg.mode, "sparsity": float(sparsity),
               "seed": int(seed)}
        timing: dict = {}
        self._last_materials = 0
        stage = "prune"
        try:
            mask = self.prune(sparsity, seed, timing)
            stats = layer_stats(mask, self.spec)
            stage = "finetune"
            t = time.perf_counter()
            params = self.train_masked(mask, seed)
            timing["finetune"] = time.perf_counter() - t
            stage = "eval"
            t = time.perf_counter()
            acc = self.evaluate(params)
            timing["eval"] = time.perf_counter() - t
        except Exception as exc:  # a failed cell is recorded and the sweep continues
            log.error("cell sparsity=%s seed=%s failed in %s: %s", sparsity, seed, stage, exc)
            log.debug(traceback.format_exc())
            err = CellError(stage, exc)
            row.update(status="failed", stage=stage, error=str(err), accuracy=None)
            return row, timing
        row.update(status="ok", accuracy=float(acc), materials=int(self._last_materials),
                   kept=int(stats["kept"]), total=int(stats["total"]),
                   layer_kept=[int(s["kept"]) for s in stats["layers"]],
                   collapsed=[int(c) for c in stats["collapsed"]])
        masks_dir = self.out / "masks"
        masks_dir.mkdir(parents=True, exist_ok=True)
        save_mask(masks_dir / f"mask-s{sparsity:g}-seed{seed}.plab", mask)
        params_dir = self.out / "params"
        params_dir.mkdir(parents=True, exist_ok=True)
        save_params(params_dir / f"params-s{sparsity:g}-seed{seed}.plab", params)
        return row, timing

    # -- the whole grid -------------------------------------------------------

    def run(self) -> RunReport:
        cfg = self.config
        self.out.mkdir(parents=True, exist_ok=True)
        digest = cfg.digest()
        (self.out / "config.json").write_text(json.dumps({"config_hash": digest, "config": cfg.to_dict()},
                                                         sort_keys=True, indent=2))
        journal = self.out / "cells.jsonl"
        done: dict[tuple[float, int], tuple[dict, dict]] = {}
        if journal.is_file():
            for line in journal.read_text().splitlines():
                if not line.strip():
                    continue
                entry = json.loads(line)
                row = entry["row"]
                if row.get("config_hash") == digest and row.get("status") == "ok":
                    done[(row["sparsity"], row["seed"])] = (row, entry.get("timing", {}))
        meta = {"config_hash": digest, "dataset": self.dataset_id}
        needs_reference = cfg.mode in ("dop", "stitch", "less-patch")
        try:
            if needs_reference:
                meta["reference_accuracy"] = self.reference()[1]
                meta["store"] = str(self.store_path())
        except Exception as exc:
            # without F no concept-based cell can run; every cell is marked failed
            rows = []
            for s in cfg.sparsities:
                for seed in cfg.seeds:
                    rows.append({"config_hash": digest, "dataset": self.dataset_id, "model": cfg.model,
                                 "criterion": cfg.criterion, "mode": cfg.mode, "sparsity": float(s),
                                 "seed": int(seed), "status": "failed", "stage": "reference",
                                 "error": f"reference: {type(exc).__name__}: {exc}", "accuracy": None})
            report = RunReport(digest, self.dataset_id, rows, {}, meta)
            report.write(self.out)
            return report
        rows, timing = [], {}
        for s in cfg.sparsities:
            for seed in cfg.seeds:
                key = (float(s), int(seed))
                if key in done:
                    row, tm = done[key]
                else:
                    log.info("cell %s/%s sparsity=%g seed=%d", cfg.criterion, cfg.mode, s, seed)
                    row, tm = self.run_cell(float(s), int(seed))
                    with open(journal, "a") as fh:
                        fh.write(json.dumps({"row": row, "timing": tm}, sort_keys=True) + "\n")
                rows.append(row)
                timing[f"{s:g}/{seed}"] = tm
        report = RunReport(digest, self.dataset_id, rows, timing, meta)
        report.write(self.out)
        return report


def run_pipeline(config: ExperimentConfig) -> RunReport:
    return Pipeline(config).run()
