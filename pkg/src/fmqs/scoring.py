"""Dual-granularity maturity scoring and quality-label generation.

The macro granularity normalizes each configuration-stage cell's task
metric by the best cell's; the micro granularity compares each feature
map against the best cell's map for the same sample via channel-spatial
cosine similarity; the two fuse into one quality score per
(configuration, stage, sample, module) with weight `fusion_weight`.

A synthetic run archive stands in for multi-module training runs:
per-sample reference features are degraded by a (config quality, stage
maturity) law — signal gain rises and noise falls as maturity grows —
and the metric grid follows the same latent maturity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import scenes
from .benchmark import BENCHMARK_CONFIG_NAMES, BENCHMARK_NDS_GRID
from .similarity import CsCosSimConfig, cs_cossim, cs_cossim_batch
from .tensorio import atomic_write_text, read_tensor, write_tensor
from .text import GroundTruthRecord

MODULES = ("IFEM", "BFEM")


class ArchiveError(RuntimeError):
    """Raised when an archive is incomplete or inconsistent."""


@dataclass(frozen=True)
class ScoringConfig:
    alpha: float = 0.5
    fusion_weight: float = 0.8
    zero_vector_policy: float = 0.0
    split_seed: int = 0
    train_fraction: float = 0.8

    def similarity(self) -> CsCosSimConfig:
        return CsCosSimConfig(alpha=self.alpha, zero_vector_policy=self.zero_vector_policy)


@dataclass(frozen=True)
class SyntheticGenSpec:
    seed: int = 0
    n_configs: int = 8
    n_stages: int = 8
    n_samples: int = 64
    max_objects: int = 2
    ifem_shape: tuple = scenes.IFEM_SHAPE
    bfem_shape: tuple = scenes.BFEM_SHAPE
    sigma0: float = 1.0
    sigma_decay: float = 0.72
    config_noise_kappa: float = 1.0
    metric_jitter: float = 0.005
    metric_source: str = "synthetic"  # or "benchmark"
    zero_final_stage: bool = False
    float32_storage: bool = False

    def __post_init__(self):
        if self.n_configs < 1 or self.n_stages < 1 or self.n_samples < 1:
            raise ValueError("archive dimensions must be positive")
        if not 0.0 < self.sigma_decay < 1.0:
            raise ValueError("sigma_decay must lie in (0, 1) so noise shrinks with stage")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be non-negative")
        if self.metric_source not in ("synthetic", "benchmark"):
            raise ValueError(f"unknown metric_source {self.metric_source!r}")
        if self.metric_source == "benchmark" and (self.n_configs, self.n_stages) != (8, 8):
            raise ValueError("benchmark metric grid requires an 8x8 archive")
        for shape, rank in ((self.ifem_shape, 4), (self.bfem_shape, 3)):
            if len(shape) != rank or any(d < 1 for d in shape):
                raise ValueError(f"invalid feature shape {shape}")


@dataclass(frozen=True)
class SotaSelection:
    config: int
    stage: int
    tie: bool

    @property
    def index(self) -> tuple:
        return (self.config, self.stage)


@dataclass
class ScoreGrid:
    model_scores: np.ndarray
    sota: SotaSelection


@dataclass(frozen=True)
class FmqsLabel:
    config: int
    stage: int
    sample: int
    module: str
    score_model: float
    score_feature: float
    fmqs: float
    split: str

    def to_json(self) -> str:
        return json.dumps({
            "config": self.config, "stage": self.stage, "sample": self.sample,
            "module": self.module, "score_model": self.score_model,
            "score_feature": self.score_feature, "fmqs": self.fmqs,
            "split": self.split,
        }, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "FmqsLabel":
        d = json.loads(line)
        return FmqsLabel(d["config"], d["stage"], d["sample"], d["module"],
                         d["score_model"], d["score_feature"], d["fmqs"], d["split"])


# ------------------------------------------------------------ scoring ops


def select_sota(grid: np.ndarray) -> SotaSelection:
    """Cell with the highest metric; ties fall to the lowest (config, stage)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError(f"metric grid must be a non-empty matrix, got shape {grid.shape}")
    flat = int(np.argmax(grid))  # argmax scans row-major: lowest (i, j) wins
    i, j = divmod(flat, grid.shape[1])
    tie = int((grid == grid[i, j]).sum()) > 1
    return SotaSelection(i, j, tie)


def macro_score(grid: np.ndarray, sota: SotaSelection) -> ScoreGrid:
    """Each cell's metric divided by the best cell's; the best cell is 1.0."""
    grid = np.asarray(grid, dtype=np.float64)
    ref = grid[sota.config, sota.stage]
    if ref <= 0.0:
        raise ValueError(f"best-cell metric must be positive, got {ref}")
    return ScoreGrid(model_scores=grid / ref, sota=sota)


def fuse_fmqs(score_model: float, score_feature: float, w: float) -> float:
    """Weighted fusion of the model-level and feature-level scores."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"fusion weight must lie in [0, 1], got {w}")
    return w * score_model + (1.0 - w) * score_feature


def micro_score(archive: "RunArchive", sota: SotaSelection, config: int, stage: int,
                sample: int, module: str, cfg: CsCosSimConfig | None = None) -> float:
    """Channel-spatial cosine of one feature map against the best cell's map."""
    cfg = cfg or CsCosSimConfig()
    a = archive.feature(config, stage, sample, module)
    b = archive.feature(sota.config, sota.stage, sample, module)
    return cs_cossim(_as_chw(a), _as_chw(b), cfg)


def _as_chw(arr: np.ndarray) -> np.ndarray:
    """Per-view stacks (V,C,H,W) fold their views into the channel axis."""
    if arr.ndim == 4:
        return arr.reshape(arr.shape[0] * arr.shape[1], arr.shape[2], arr.shape[3])
    return arr


# ----------------------------------------------------------- run archives


@dataclass
class RunArchive:
    """The N x M configuration-stage grid plus per-sample feature stores."""

    spec: SyntheticGenSpec
    config_names: list
    config_quality: np.ndarray
    metric_grid: np.ndarray
    scenes: list
    gain: np.ndarray  # (N, M)
    sigma: np.ndarray  # (N, M)
    root: Path | None = None
    store: dict | None = None  # module -> (N, M, S, ...) when in memory

    @property
    def n_configs(self) -> int:
        return self.spec.n_configs

    @property
    def n_stages(self) -> int:
        return self.spec.n_stages

    @property
    def n_samples(self) -> int:
        return self.spec.n_samples

    def module_shape(self, module: str) -> tuple:
        return self.spec.ifem_shape if module == "IFEM" else self.spec.bfem_shape

    def _cell_path(self, config: int, stage: int, module: str) -> Path:
        return self.root / "features" / f"{module.lower()}_c{config}_s{stage}.fmqt"

    def features(self, config: int, stage: int, module: str) -> np.ndarray:
        """(S, ...) stack for one configuration-stage cell."""
        if module not in MODULES:
            raise KeyError(f"unknown module {module!r}")
        if not (0 <= config < self.n_configs and 0 <= stage < self.n_stages):
            raise KeyError(f"cell ({config}, {stage}) outside the archive grid")
        if self.store is not None:
            return self.store[module][config, stage]
        stack = read_tensor(self._cell_path(config, stage, module))
        want = (self.n_samples,) + self.module_shape(module)
        if stack.shape != want:
            raise ArchiveError(
                f"{self._cell_path(config, stage, module)}: shape {stack.shape}, expected {want}"
            )
        return stack

    def feature(self, config: int, stage: int, sample: int, module: str) -> np.ndarray:
        if not 0 <= sample < self.n_samples:
            raise KeyError(f"sample {sample} outside the archive")
        return self.features(config, stage, module)[sample]

    def module_stack(self, module: str) -> np.ndarray:
        """(N, M, S, ...) array of every cell; loads eagerly from disk."""
        if self.store is not None:
            return self.store[module]
        shape = (self.n_configs, self.n_stages, self.n_samples) + self.module_shape(module)
        out = np.empty(shape)
        for i in range(self.n_configs):
            for j in range(self.n_stages):
                out[i, j] = self.features(i, j, module)
        return out

    def validate(self):
        """Every claimed (config, stage, module) cell must be present."""
        if self.store is not None:
            for module in MODULES:
                if module not in self.store:
                    raise ArchiveError(f"in-memory archive missing module {module}")
            return
        missing = [
            str(self._cell_path(i, j, m))
            for m in MODULES
            for i in range(self.n_configs)
            for j in range(self.n_stages)
            if not self._cell_path(i, j, m).exists()
        ]
        if missing:
            raise ArchiveError(f"archive incomplete, {len(missing)} missing files, "
                               f"first: {missing[0]}")


def degradation_law(spec: SyntheticGenSpec):
    """(quality, gain, sigma, maturity) grids implied by a generator spec."""
    q = np.linspace(0.55, 1.0, spec.n_configs)
    s = (np.arange(spec.n_stages) + 1.0) / spec.n_stages
    m = q[:, None] * (0.3 + 0.7 * s[None, :])
    gain = 0.6 + 0.4 * m
    sigma = (spec.sigma0
             * spec.sigma_decay ** (np.arange(spec.n_stages) + 1.0)[None, :]
             * (1.0 + spec.config_noise_kappa * (1.0 - q))[:, None])
    if spec.zero_final_stage:
        sigma[:, -1] = 0.0
        gain[:, -1] = 1.0
    return q, gain, sigma, m


def _metric_grid(spec: SyntheticGenSpec, maturity: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    if spec.metric_source == "benchmark":
        return BENCHMARK_NDS_GRID.copy()
    jitter = rng.uniform(-spec.metric_jitter, spec.metric_jitter, size=maturity.shape)
    return np.clip(0.15 + 0.62 * maturity + jitter, 0.01, 0.99)


def _reference_stacks(spec: SyntheticGenSpec, scene_list) -> dict:
    refs = {
        "IFEM": np.stack([scenes.render_view_reference(sc, spec.ifem_shape)
                          for sc in scene_list]),
        "BFEM": np.stack([scenes.render_bev_reference(sc, spec.bfem_shape)
                          for sc in scene_list]),
    }
    return refs


def _cell_features(refs: np.ndarray, gain: float, sigma: float,
                   seed_key: list) -> np.ndarray:
    if sigma == 0.0 and gain == 1.0:
        return refs.copy()
    rng = np.random.default_rng(np.random.SeedSequence(seed_key))
    return gain * refs + sigma * rng.standard_normal(refs.shape)


def generate_synthetic_archive(spec: SyntheticGenSpec,
                               out_dir: str | Path | None = None) -> RunArchive:
    """Build a complete run archive; identical seeds give identical bits.

    With `out_dir` the features stream to tensor files next to a JSON
    manifest; otherwise everything stays in memory.
    """
    root_seq = np.random.SeedSequence(spec.seed)
    scene_rng = np.random.default_rng(root_seq.spawn(1)[0])
    scene_list = [scenes.sample_scene(k, scene_rng, spec.max_objects)
                  for k in range(spec.n_samples)]
    q, gain, sigma, maturity = degradation_law(spec)
    metric_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xA17]))
    grid = _metric_grid(spec, maturity, metric_rng)
    if spec.metric_source == "benchmark":
        names = list(BENCHMARK_CONFIG_NAMES)
    else:
        names = [f"config-{i}" for i in range(spec.n_configs)]
    refs = _reference_stacks(spec, scene_list)

    archive = RunArchive(
        spec=spec, config_names=names, config_quality=q, metric_grid=grid,
        scenes=scene_list, gain=gain, sigma=sigma,
        root=Path(out_dir) if out_dir is not None else None,
        store=None if out_dir is not None else {},
    )

    if out_dir is None:
        for mi, module in enumerate(MODULES):
            cells = np.empty((spec.n_configs, spec.n_stages) + refs[module].shape)
            for i in range(spec.n_configs):
                for j in range(spec.n_stages):
                    cells[i, j] = _cell_features(refs[module], gain[i, j], sigma[i, j],
                                                 [spec.seed, mi, i, j])
            archive.store[module] = cells
        return archive

    root = Path(out_dir)
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    files = {m: [] for m in MODULES}
    for mi, module in enumerate(MODULES):
        for i in range(spec.n_configs):
            row = []
            for j in range(spec.n_stages):
                cell = _cell_features(refs[module], gain[i, j], sigma[i, j],
                                      [spec.seed, mi, i, j])
                path = archive._cell_path(i, j, module)
                write_tensor(path, cell, float32=spec.float32_storage)
                row.append(str(path.relative_to(root)))
            files[module].append(row)

    ann_paths = []
    for sc in scene_list:
        scene_rec, cams = scenes.scene_records(sc)
        payload = {
            "sample": sc.sample_id,
            "scene": scene_rec.to_dict(),
            "cameras": [c.to_dict() for c in cams],
        }
        path = root / "annotations" / f"sample_{sc.sample_id:04d}.json"
        atomic_write_text(path, json.dumps(payload, sort_keys=True))
        ann_paths.append(str(path.relative_to(root)))

    manifest = {
        "schema_version": 1,
        "seed": spec.seed,
        "configs": [{"name": n, "quality": float(qi)} for n, qi in zip(names, q)],
        "n_stages": spec.n_stages,
        "n_samples": spec.n_samples,
        "metric_grid": grid.tolist(),
        "modules": {
            "IFEM": {"shape": list(spec.ifem_shape), "files": files["IFEM"]},
            "BFEM": {"shape": list(spec.bfem_shape), "files": files["BFEM"]},
        },
        "annotations": ann_paths,
        "generator": {
            "max_objects": spec.max_objects,
            "sigma0": spec.sigma0,
            "sigma_decay": spec.sigma_decay,
            "config_noise_kappa": spec.config_noise_kappa,
            "metric_jitter": spec.metric_jitter,
            "metric_source": spec.metric_source,
            "zero_final_stage": spec.zero_final_stage,
            "float32_storage": spec.float32_storage,
        },
    }
    atomic_write_text(root / "manifest.json", json.dumps(manifest, sort_keys=True, indent=1))
    return archive


def load_archive(root: str | Path) -> RunArchive:
    """Open a generated archive from its manifest; features load lazily."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ArchiveError(f"no manifest at {manifest_path}")
    m = json.loads(manifest_path.read_text())
    gen = m["generator"]
    spec = SyntheticGenSpec(
        seed=m["seed"],
        n_configs=len(m["configs"]),
        n_stages=m["n_stages"],
        n_samples=m["n_samples"],
        max_objects=gen["max_objects"],
        ifem_shape=tuple(m["modules"]["IFEM"]["shape"]),
        bfem_shape=tuple(m["modules"]["BFEM"]["shape"]),
        sigma0=gen["sigma0"],
        sigma_decay=gen["sigma_decay"],
        config_noise_kappa=gen["config_noise_kappa"],
        metric_jitter=gen["metric_jitter"],
        metric_source=gen["metric_source"],
        zero_final_stage=gen["zero_final_stage"],
        float32_storage=gen["float32_storage"],
    )
    scene_list = []
    for rel in m["annotations"]:
        payload = json.loads((root / rel).read_text())
        rec = GroundTruthRecord.from_dict(payload["scene"])
        scene_list.append(scenes.Scene(payload["sample"], rec.objects))
    q, gain, sigma, _ = degradation_law(spec)
    return RunArchive(
        spec=spec,
        config_names=[c["name"] for c in m["configs"]],
        config_quality=np.array([c["quality"] for c in m["configs"]]),
        metric_grid=np.array(m["metric_grid"]),
        scenes=scene_list,
        gain=gain,
        sigma=sigma,
        root=root,
        store=None,
    )


# ------------------------------------------------------------ label dataset


@dataclass
class LabelDataset:
    labels: list
    train_samples: list
    test_samples: list

    @property
    def train(self) -> list:
        return [l for l in self.labels if l.split == "train"]

    @property
    def test(self) -> list:
        return [l for l in self.labels if l.split == "test"]

    def for_module(self, module: str, split: str | None = None) -> list:
        out = [l for l in self.labels if l.module == module]
        if split is not None:
            out = [l for l in out if l.split == split]
        return out

    def to_jsonl(self) -> str:
        return "\n".join(l.to_json() for l in self.labels) + "\n"

    @staticmethod
    def from_jsonl(textblob: str) -> "LabelDataset":
        labels = [FmqsLabel.from_json(line) for line in textblob.splitlines() if line.strip()]
        train = sorted({l.sample for l in labels if l.split == "train"})
        test = sorted({l.sample for l in labels if l.split == "test"})
        return LabelDataset(labels, train, test)


def split_samples(n_samples: int, cfg: ScoringConfig) -> tuple:
    """Deterministic seeded train/test partition by sample index."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.split_seed, 0x5B117]))
    order = rng.permutation(n_samples)
    n_train = int(round(cfg.train_fraction * n_samples))
    n_train = min(max(n_train, 1), n_samples - 1) if n_samples > 1 else n_samples
    train = sorted(int(k) for k in order[:n_train])
    test = sorted(int(k) for k in order[n_train:])
    return train, test


def build_label_dataset(archive: RunArchive, cfg: ScoringConfig | None = None) -> LabelDataset:
    """Quality labels for every (config, stage, sample, module) cell."""
    cfg = cfg or ScoringConfig()
    archive.validate()
    sota = select_sota(archive.metric_grid)
    grid = macro_score(archive.metric_grid, sota)
    sim_cfg = cfg.similarity()
    train, test = split_samples(archive.n_samples, cfg)
    split_of = {k: "train" for k in train}
    split_of.update({k: "test" for k in test})

    labels = []
    for module in MODULES:
        ref = _as_chw_stack(archive.features(sota.config, sota.stage, module))
        for i in range(archive.n_configs):
            for j in range(archive.n_stages):
                stack = _as_chw_stack(archive.features(i, j, module))
                micro = cs_cossim_batch(stack, ref, sim_cfg)
                sm = float(grid.model_scores[i, j])
                for k in range(archive.n_samples):
                    sf = float(micro[k])
                    labels.append(FmqsLabel(
                        config=i, stage=j, sample=k, module=module,
                        score_model=sm, score_feature=sf,
                        fmqs=fuse_fmqs(sm, sf, cfg.fusion_weight),
                        split=split_of[k],
                    ))
    return LabelDataset(labels, train, test)


def _as_chw_stack(stack: np.ndarray) -> np.ndarray:
    if stack.ndim == 5:  # (S, V, C, H, W) -> (S, V*C, H, W)
        s, v, c, h, w = stack.shape
        return stack.reshape(s, v * c, h, w)
    return stack
