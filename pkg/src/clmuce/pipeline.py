"""Experiment orchestration: datasets, training stages, evaluation sweeps and the manifest.

Everything here is a pure function of (config, input artifacts, root seed).  A
``Workspace`` is one output directory with a ``manifest.json`` recording the
SHA-256 of every file it produced and, per stage, the hashes of the inputs the
stage consumed.  Consumers re-hash their inputs and refuse mismatches.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adaptive import AdaptiveModel, estimate_multi_user, per_user_nmse
from .baselines import (
    RawCnnModel,
    angular_dictionary,
    jomp,
    location_based_ce_apply,
    location_based_ce_train,
    single_user_ce_apply,
    single_user_ce_train,
)
from .channel_sim import (
    Dataset,
    build_datasets,
    generate_scene,
    load_dataset,
    make_pilot,
    remeasure,
    save_dataset,
)
from .clnet import clnet_arch, extract_features, sample_pairs_by_distance, similarity_curve, train_clnet
from .config import ExperimentConfig
from .dnet import (
    DsnetResult,
    FeatureScaler,
    cluster_training_data,
    greedy_groups,
    group_min_similarity,
    groups_of_size,
    train_dsnet,
    train_joint,
)
from .numerics import ConvNetArch, ModelParams, load_params, save_params, stream
from .storage import artifact_files, file_digest, load_arrays, save_arrays

log = logging.getLogger(__name__)

DATASETS = ("contrastive", "downstream", "test")
METHODS = ("proposed-joint", "proposed-separate", "single-user", "location-based", "jomp")
AXES = ("snr", "pilot", "labels", "map")
RESULT_COLUMNS = ("method", "axis_value", "nmse", "nmse_db", "n_test", "seed")


class PipelineError(RuntimeError):
    code = "pipeline"


class DependencyError(PipelineError):
    code = "missing-dependency"


class OutputExistsError(PipelineError):
    code = "output-exists"


class ManifestError(PipelineError):
    code = "input-mismatch"


# -- workspace and manifest -----------------------------------------------------------

class Workspace:
    """An output directory plus its manifest of produced files and stage inputs."""

    def __init__(self, root: str | Path, force: bool = False):
        self.root = Path(root)
        self.force = force

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def load_manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"files": {}, "stages": {}}
        return json.loads(self.manifest_path.read_text())

    def _write_manifest(self, doc: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def stem(self, rel: str) -> Path:
        return self.root / rel

    def files_of(self, rel: str) -> list[Path]:
        return list(artifact_files(self.stem(rel)))

    def rel(self, path: Path) -> str:
        return Path(os.path.relpath(path, self.root)).as_posix()

    def exists(self, rel: str) -> bool:
        return all(p.exists() for p in self.files_of(rel))

    def claim(self, rels: list[str]) -> None:
        """Refuse to overwrite existing outputs unless forced."""
        if self.force:
            return
        taken = [r for r in rels if any(p.exists() for p in self.files_of(r))]
        if taken:
            raise OutputExistsError(f"{self.root}: outputs exist ({', '.join(taken)}); use --force to overwrite")

    def verify(self, rel: str) -> dict[str, str]:
        """Hashes of an artifact's files, checked against this workspace's manifest."""
        files = self.load_manifest()["files"]
        out = {}
        for path in self.files_of(rel):
            key = self.rel(path)
            if not path.exists():
                raise DependencyError(f"required artifact {path} does not exist")
            digest = file_digest(path)
            if key not in files:
                raise ManifestError(f"{path} is not recorded in {self.manifest_path}")
            if files[key] != digest:
                raise ManifestError(f"{path} changed since it was produced (hash mismatch)")
            out[key] = digest
        return out

    def record(self, stage: str, inputs: dict[str, str], outputs: list[Path]) -> None:
        doc = self.load_manifest()
        produced = {}
        for path in outputs:
            key = self.rel(path)
            produced[key] = file_digest(path)
        doc["files"].update(produced)
        doc["stages"][stage] = {"inputs": dict(sorted(inputs.items())), "outputs": sorted(produced)}
        self._write_manifest(doc)

    def check_stage(self, stage: str) -> None:
        """Refuse a stage whose recorded inputs no longer match the files on disk."""
        entry = self.load_manifest()["stages"].get(stage)
        if entry is None:
            raise DependencyError(f"stage {stage!r} has not been run in {self.root}")
        for key, digest in entry["inputs"].items():
            path = (self.root / key).resolve()
            if not path.exists() or file_digest(path) != digest:
                raise ManifestError(f"stage {stage!r} in {self.root} was built from a different {key}; retrain")


def external_inputs(consumer: Workspace, owner: Workspace, rel: str) -> dict[str, str]:
    """Verified hashes of ``owner``'s artifact, keyed relative to ``consumer``."""
    hashes = owner.verify(rel)
    return {consumer.rel(owner.root / k): v for k, v in hashes.items()}


# -- run context --------------------------------------------------------------------

@dataclass
class Run:
    """Where one experiment point reads data and the CLNet, and where it writes models."""

    cfg: ExperimentConfig
    data: Workspace
    models: Workspace
    n_labels: int | None = None

    @classmethod
    def main(cls, cfg: ExperimentConfig, out: str | Path, force: bool = False) -> "Run":
        ws = Workspace(out, force)
        return cls(cfg, ws, ws)

    def point(self, axis: str, value) -> "Run":
        """Sub-run for one sweep point, written to ``sweeps/<axis>_<value>``."""
        sub = Workspace(self.data.root / "sweeps" / f"{axis}_{value}", self.models.force)
        if axis == "pilot":
            cfg = replace(self.cfg, system=replace(self.cfg.system, pilot_len=int(value)))
            return Run(cfg, sub, sub)
        if axis == "labels":
            return Run(self.cfg, self.data, sub, int(value))
        raise PipelineError(f"axis {axis!r} has no per-point models")

    def inputs(self, rel: str) -> dict[str, str]:
        return external_inputs(self.models, self.data, rel)

    def dataset(self, name: str) -> Dataset:
        self.data.verify(f"data/{name}")
        ds = load_dataset(self.data.stem(f"data/{name}"))
        if name == "downstream" and self.n_labels is not None:
            if self.n_labels > len(ds):
                raise PipelineError(f"{self.n_labels} labels requested but only {len(ds)} downstream samples exist")
            ds = ds.subset(np.arange(self.n_labels))
        return ds


# -- pure training pieces -----------------------------------------------------------

@dataclass
class SeparateModels:
    scaler: FeatureScaler
    floor: float
    nets: dict[int, DsnetResult]


def training_floor(cfg: ExperimentConfig, features: np.ndarray) -> float:
    """Grouping floor: configured number, or the median intra-group min similarity on training data."""
    if cfg.test.floor != "median":
        return float(cfg.test.floor)
    mins = [group_min_similarity(features, g) for g in greedy_groups(features, cfg.downstream.q_max) if len(g) > 1]
    return float(np.median(mins)) if mins else math.inf


def training_groups(features: np.ndarray, q: int) -> np.ndarray:
    if q == 1:
        return np.arange(len(features)).reshape(-1, 1)
    return groups_of_size(cluster_training_data(features, None, q), q)


def fit_clnet(cfg: ExperimentConfig, contrastive: Dataset):
    arch = clnet_arch(cfg.system, cfg.contrastive.hidden)
    result = train_clnet(contrastive, cfg.contrastive.training(), cfg.contrastive.epochs, cfg.seed, arch)
    return arch, result.params, result.losses


def fit_separate(cfg: ExperimentConfig, arch: ConvNetArch, clnet: ModelParams, downstream: Dataset,
                 sizes=None) -> SeparateModels:
    F = extract_features(arch, clnet, downstream.y_real)
    scaler = FeatureScaler.fit(F)
    X = scaler(F)
    nets = {}
    for q in sizes or range(1, cfg.downstream.q_max + 1):
        idx = training_groups(F, q)
        if len(idx) == 0:
            log.warning("no training groups of size %d; DSNet-%d not trained", q, q)
            continue
        nets[q] = train_dsnet(q, idx, X, downstream.y_real, downstream.h, cfg.system, cfg.downstream.schedule(),
                              cfg.seed)
    return SeparateModels(scaler, training_floor(cfg, F), nets)


@dataclass
class JointModels:
    clnet: ModelParams
    scaler: FeatureScaler
    floor: float
    nets: dict[int, ModelParams]
    losses: list[float] = field(default_factory=list)


def fit_joint(cfg: ExperimentConfig, arch: ConvNetArch, clnet: ModelParams, separate: SeparateModels,
              downstream: Dataset) -> JointModels:
    """Joint refinement of the CLNet with DSNet-Q, then DSNet-1..Q-1 retrained on the refined features."""
    Q = max(separate.nets)
    F = extract_features(arch, clnet, downstream.y_real)
    idx = training_groups(F, Q)
    sched = replace(cfg.downstream.schedule(), epochs=cfg.joint.epochs)
    jr = train_joint(arch, clnet, separate.nets[Q].arch, separate.nets[Q].params, idx, downstream.y_real,
                     downstream.h, cfg.joint.joint(), sched, cfg.seed, separate.scaler)
    F2 = extract_features(arch, jr.clnet, downstream.y_real)
    X2 = separate.scaler(F2)
    nets = {Q: jr.dsnet}
    for q, net in separate.nets.items():
        if q == Q:
            continue
        idx_q = training_groups(F2, q)
        if len(idx_q) == 0:
            continue
        nets[q] = train_dsnet(q, idx_q, X2, downstream.y_real, downstream.h, cfg.system, cfg.downstream.schedule(),
                              cfg.seed, params=net.params.copy()).params
    return JointModels(jr.clnet, separate.scaler, training_floor(cfg, F2), nets, jr.losses)


# -- persistence of model pieces ------------------------------------------------------

def _encode(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def save_scaler(stem: Path, scaler: FeatureScaler, floor: float) -> list[Path]:
    return list(save_arrays(stem, {"mean": scaler.mean, "std": scaler.std},
                            {"kind": "scaler", "floor": _encode(floor)}))


def load_scaler(stem: Path) -> tuple[FeatureScaler, float]:
    arrays, doc = load_arrays(stem)
    return FeatureScaler(arrays["mean"], arrays["std"]), float(doc["floor"])


def save_model(stem: Path, arch: ConvNetArch, params: ModelParams, role: str) -> list[Path]:
    return list(save_params(stem, params, {"arch": arch.to_meta(), "role": role}))


def load_model(stem: Path) -> tuple[ConvNetArch, ModelParams]:
    params, meta = load_params(stem)
    return ConvNetArch.from_meta(meta["arch"]), params


def write_trace(path: Path, losses, key: str = "epoch") -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([key, "loss"])
    for i, v in enumerate(losses):
        w.writerow([i, repr(float(v))])
    path.write_text(buf.getvalue())
    return path


# -- commands: generate and train ------------------------------------------------------

def scene_of(cfg: ExperimentConfig):
    return generate_scene(cfg.system, cfg.scene.n_scatterers, cfg.seed, cfg.scene.area)


def cmd_generate(run: Run) -> list[Path]:
    cfg = run.cfg
    ws = run.data
    rels = [f"data/{n}" for n in DATASETS]
    ws.claim(rels)
    sets = build_datasets(scene_of(cfg), cfg.system,
                          (cfg.data.n_contrastive, cfg.data.n_downstream, cfg.data.n_test), cfg.data.snr_db, cfg.seed)
    outputs: list[Path] = []
    for name in DATASETS:
        outputs += list(save_dataset(ws.stem(f"data/{name}"), sets[name]))
    config_path = ws.root / "config.json"
    config_path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    ws.record("generate", {}, outputs + [config_path])
    return outputs


def stage_clnet(run: Run) -> None:
    ws = run.data  # the CLNet lives with the unlabeled data it was trained on
    ws.claim(["models/clnet"])
    inputs = ws.verify("data/contrastive")
    arch, params, losses = fit_clnet(run.cfg, run.dataset("contrastive"))
    outputs = save_model(ws.stem("models/clnet"), arch, params, "clnet")
    outputs.append(write_trace(ws.root / "traces" / "clnet.csv", losses))
    ws.record("clnet", inputs, outputs)


def _clnet(run: Run) -> tuple[ConvNetArch, ModelParams, dict[str, str]]:
    if not run.data.exists("models/clnet"):
        raise DependencyError(f"stage needs a trained CLNet in {run.data.root} (run --stage clnet first)")
    run.data.check_stage("clnet")
    inputs = run.inputs("models/clnet")
    arch, params = load_model(run.data.stem("models/clnet"))
    return arch, params, inputs


def stage_dsnet(run: Run, q: int) -> None:
    ws = run.models
    if not 1 <= q <= run.cfg.downstream.q_max:
        raise PipelineError(f"dsnet:{q} outside 1..{run.cfg.downstream.q_max}")
    ws.claim([f"models/separate/dsnet{q}"])
    arch, clnet, inputs = _clnet(run)
    inputs.update(run.inputs("data/downstream"))
    sep = fit_separate(run.cfg, arch, clnet, run.dataset("downstream"), sizes=[q])
    if q not in sep.nets:
        raise PipelineError(f"no training groups of size {q}")
    net = sep.nets[q]
    outputs = save_model(ws.stem(f"models/separate/dsnet{q}"), net.arch, net.params, f"dsnet{q}")
    outputs += save_scaler(ws.stem("models/separate/scaler"), sep.scaler, sep.floor)
    outputs.append(write_trace(ws.root / "traces" / f"dsnet{q}.csv", net.losses))
    ws.record(f"dsnet:{q}", inputs, outputs)


def _separate(run: Run) -> tuple[SeparateModels, dict[str, str]]:
    ws = run.models
    inputs: dict[str, str] = {}
    nets = {}
    for q in range(1, run.cfg.downstream.q_max + 1):
        rel = f"models/separate/dsnet{q}"
        if not ws.exists(rel):
            raise DependencyError(f"joint stage needs {ws.stem(rel)} (run --stage dsnet:{q} first)")
        ws.check_stage(f"dsnet:{q}")
        inputs.update(ws.verify(rel))
        arch, params = load_model(ws.stem(rel))
        nets[q] = DsnetResult(q, arch, params)
    inputs.update(ws.verify("models/separate/scaler"))
    scaler, floor = load_scaler(ws.stem("models/separate/scaler"))
    return SeparateModels(scaler, floor, nets), inputs


def stage_joint(run: Run) -> None:
    ws = run.models
    Q = run.cfg.downstream.q_max
    rels = ["models/joint/clnet", "models/joint/scaler"] + [f"models/joint/dsnet{q}" for q in range(1, Q + 1)]
    ws.claim(rels)
    arch, clnet, inputs = _clnet(run)
    sep, sep_inputs = _separate(run)
    inputs.update(sep_inputs)
    inputs.update(run.inputs("data/downstream"))
    jm = fit_joint(run.cfg, arch, clnet, sep, run.dataset("downstream"))
    outputs = save_model(ws.stem("models/joint/clnet"), arch, jm.clnet, "clnet-joint")
    for q, params in sorted(jm.nets.items()):
        outputs += save_model(ws.stem(f"models/joint/dsnet{q}"), sep.nets[q].arch, params, f"dsnet{q}-joint")
    outputs += save_scaler(ws.stem("models/joint/scaler"), jm.scaler, jm.floor)
    outputs.append(write_trace(ws.root / "traces" / "joint.csv", jm.losses))
    ws.record("joint", inputs, outputs)


def stage_baselines(run: Run) -> None:
    ws = run.models
    cfg = run.cfg
    G = cfg.baselines.location_group_size
    rels = ["models/baselines/single1"] + [f"models/baselines/location{q}" for q in range(1, G + 1)]
    ws.claim(rels)
    inputs = run.inputs("data/downstream")
    down = run.dataset("downstream")
    sched = cfg.downstream.schedule()
    su = single_user_ce_train(down.y_real, down.h, cfg.system, sched, cfg.seed)
    outputs = save_model(ws.stem("models/baselines/single1"), su.nets[1].arch, su.nets[1].params, "single-user")
    outputs.append(write_trace(ws.root / "traces" / "single1.csv", su.nets[1].losses))
    lb = location_based_ce_train(down.positions, down.y_real, down.h, G, cfg.system, sched, cfg.seed)
    for q, net in sorted(lb.nets.items()):
        outputs += save_model(ws.stem(f"models/baselines/location{q}"), net.arch, net.params, f"location{q}")
        outputs.append(write_trace(ws.root / "traces" / f"location{q}.csv", net.losses))
    ws.record("baselines", inputs, outputs)


def parse_stage(stage: str, q_max: int) -> list[str]:
    if stage == "all":
        return ["clnet"] + [f"dsnet:{q}" for q in range(1, q_max + 1)] + ["joint", "baselines"]
    if stage in ("clnet", "joint", "baselines"):
        return [stage]
    if stage.startswith("dsnet:"):
        try:
            q = int(stage.split(":", 1)[1])
        except ValueError:
            raise PipelineError(f"bad stage {stage!r}; expected dsnet:<q>") from None
        return [f"dsnet:{q}"]
    raise PipelineError(f"unknown stage {stage!r}; expected clnet, dsnet:<q>, joint, baselines or all")


def run_stage(run: Run, stage: str) -> None:
    if stage == "clnet":
        stage_clnet(run)
    elif stage.startswith("dsnet:"):
        stage_dsnet(run, int(stage.split(":")[1]))
    elif stage == "joint":
        stage_joint(run)
    elif stage == "baselines":
        stage_baselines(run)
    else:
        raise PipelineError(f"unknown stage {stage!r}")


def cmd_train(run: Run, stage: str, axis: str | None = None) -> None:
    """Train the main run, or every point of a sweep axis that needs its own models."""
    stages = parse_stage(stage, run.cfg.downstream.q_max)
    if axis is None:
        for s in stages:
            run_stage(run, s)
        return
    for value in sweep_values(run.cfg, axis):
        point = run.point(axis, value)
        if axis == "pilot" and not point.data.exists("data/test"):
            cmd_generate(point)
        for s in stages:
            if axis == "labels" and s == "clnet":
                continue  # the CLNet needs no labels; the main one is shared
            run_stage(point, s)


# -- evaluation ---------------------------------------------------------------------

@dataclass
class LoadedModels:
    proposed: dict[str, AdaptiveModel] = field(default_factory=dict)
    single: RawCnnModel | None = None
    location: RawCnnModel | None = None
    missing: list[str] = field(default_factory=list)


def _load_adaptive(run: Run, variant: str) -> AdaptiveModel:
    ws = run.models
    Q = run.cfg.downstream.q_max
    if variant == "joint":
        ws.check_stage("joint")
        ws.verify("models/joint/clnet")
        cl_arch, clnet = load_model(ws.stem("models/joint/clnet"))
    else:
        for q in range(1, Q + 1):
            ws.check_stage(f"dsnet:{q}")
        cl_arch, clnet, _ = _clnet(run)
    archs, nets = {}, {}
    for q in range(1, Q + 1):
        rel = f"models/{variant}/dsnet{q}"
        ws.verify(rel)
        archs[q], nets[q] = load_model(ws.stem(rel))
    ws.verify(f"models/{variant}/scaler")
    scaler, floor = load_scaler(ws.stem(f"models/{variant}/scaler"))
    return AdaptiveModel(cl_arch, clnet, archs, nets, floor, scaler)


def load_models(run: Run) -> LoadedModels:
    out = LoadedModels()
    for variant in ("joint", "separate"):
        try:
            out.proposed[variant] = _load_adaptive(run, variant)
        except (DependencyError, FileNotFoundError) as exc:
            out.missing.append(f"proposed-{variant}: {exc}")
    try:
        run.models.check_stage("baselines")
        run.models.verify("models/baselines/single1")
        arch, params = load_model(run.models.stem("models/baselines/single1"))
        out.single = RawCnnModel({1: DsnetResult(1, arch, params)}, run.cfg.system, 1)
        G = run.cfg.baselines.location_group_size
        nets = {}
        for q in range(1, G + 1):
            rel = f"models/baselines/location{q}"
            if run.models.exists(rel):
                run.models.verify(rel)
                a, p = load_model(run.models.stem(rel))
                nets[q] = DsnetResult(q, a, p)
        out.location = RawCnnModel(nets, run.cfg.system, G)
    except DependencyError as exc:
        out.missing.append(f"baselines: {exc}")
    return out


def chunks(n: int, k: int) -> list[np.ndarray]:
    return [np.arange(a, min(a + k, n)) for a in range(0, n, k)]


def evaluate_methods(cfg: ExperimentConfig, models: LoadedModels, test: Dataset) -> dict[str, np.ndarray]:
    """Per-user NMSE of every available method; test users are processed in index-order batches of K."""
    K = cfg.test.k_users
    y = test.y_real
    h = test.h
    parts = chunks(len(test), K)
    out: dict[str, np.ndarray] = {}
    for variant, model in models.proposed.items():
        est = np.vstack([estimate_multi_user(model, y[c]).estimates for c in parts])
        out[f"proposed-{variant}"] = per_user_nmse(h, est)
    if models.single is not None:
        out["single-user"] = single_user_ce_apply(models.single, y, h).nmse
    if models.location is not None and models.location.nets:
        est = np.vstack([location_based_ce_apply(models.location, test.positions[c], y[c], cfg.seed).estimates
                         for c in parts])
        out["location-based"] = per_user_nmse(h, est)
    pilot = make_pilot(test.config, test.pilot_seed)
    A = angular_dictionary(test.config.n_tx, cfg.baselines.jomp_grid)
    est = np.vstack([jomp(test.Y[c], pilot, A, cfg.baselines.jomp_sparsity, cfg.baselines.jomp_tol) for c in parts])
    out["jomp"] = per_user_nmse(h, est)
    return {m: out[m] for m in METHODS if m in out}


def sweep_values(cfg: ExperimentConfig, axis: str) -> list:
    if axis == "snr":
        return list(cfg.sweep.snr_db)
    if axis == "pilot":
        return list(cfg.sweep.pilot_len)
    if axis == "labels":
        return list(cfg.sweep.labels)
    if axis == "map":
        return [cfg.data.snr_db]
    raise PipelineError(f"unknown axis {axis!r}; expected one of {', '.join(AXES)}")


def result_rows(per_method: dict[str, np.ndarray], axis_value, seed: int) -> list[list]:
    rows = []
    for method, nm in per_method.items():
        lin = float(np.nanmean(nm))
        rows.append([method, axis_value, repr(lin), repr(float(10 * np.log10(lin))), int(np.sum(~np.isnan(nm))),
                     seed])
    return rows


def write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())
    return path


@dataclass
class EvaluationResult:
    csv_path: Path
    rows: list[list]
    missing: list[str]
    extra: list[Path] = field(default_factory=list)


def _test_set(run: Run) -> tuple[Dataset, dict[str, str]]:
    inputs = run.inputs("data/test")
    return run.dataset("test"), inputs


def cmd_evaluate(run: Run, axis: str) -> EvaluationResult:
    cfg = run.cfg
    ws = run.models
    rows: list[list] = []
    missing: list[str] = []
    inputs: dict[str, str] = {}
    extra: list[Path] = []
    if axis == "snr":
        test, inputs = _test_set(run)
        models = load_models(run)
        missing += models.missing
        scene = scene_of(cfg)
        pilot = make_pilot(test.config, test.pilot_seed)
        for snr in cfg.sweep.snr_db:
            t = test if float(snr) == test.snr_db else remeasure(test, scene, pilot, float(snr), cfg.seed)
            rows += result_rows(evaluate_methods(cfg, models, t), snr, cfg.seed)
    elif axis in ("pilot", "labels"):
        for value in sweep_values(cfg, axis):
            point = run.point(axis, value)
            try:
                test, ins = _test_set(point)
            except DependencyError as exc:
                missing.append(f"{axis}={value}: {exc}")
                continue
            inputs.update({ws.rel(point.models.root / k): v for k, v in ins.items()})
            models = load_models(point)
            missing += [f"{axis}={value}: {m}" for m in models.missing]
            rows += result_rows(evaluate_methods(cfg, models, test), value, cfg.seed)
    elif axis == "map":
        test, inputs = _test_set(run)
        models = load_models(run)
        missing += models.missing
        per = evaluate_methods(cfg, models, test)
        rows += result_rows(per, cfg.data.snr_db, cfg.seed)
        method = "proposed-joint" if "proposed-joint" in per else next(iter(per))
        grid_path = ws.root / "results" / "map_grid.csv"
        extra.append(write_csv(grid_path, MAP_COLUMNS, map_grid(test.positions, per[method], cfg, method)))
        extra.append(plot_map(ws.root / "results" / "map.svg", grid_path, cfg))
    else:
        raise PipelineError(f"unknown axis {axis!r}; expected one of {', '.join(AXES)}")
    path = write_csv(ws.root / "results" / f"{axis}.csv", RESULT_COLUMNS, rows)
    if rows:
        extra.append(plot_sweep(ws.root / "results" / f"{axis}.svg", rows, axis))
    ws.record(f"evaluate:{axis}", inputs, [path] + [p for p in extra if p.suffix == ".csv"])
    for m in missing:
        log.warning("missing: %s", m)
    return EvaluationResult(path, rows, missing, extra)


MAP_COLUMNS = ("method", "ix", "iy", "x_lo", "x_hi", "y_lo", "y_hi", "n_users", "nmse", "nmse_db")


def map_grid(positions: np.ndarray, nmse: np.ndarray, cfg: ExperimentConfig, method: str) -> list[list]:
    xmin, xmax, ymin, ymax = cfg.scene.area
    n = cfg.sweep.map_cells
    xe = np.linspace(xmin, xmax, n + 1)
    ye = np.linspace(ymin, ymax, n + 1)
    ix = np.clip(np.searchsorted(xe, positions[:, 0], side="right") - 1, 0, n - 1)
    iy = np.clip(np.searchsorted(ye, positions[:, 1], side="right") - 1, 0, n - 1)
    rows = []
    for i in range(n):
        for j in range(n):
            sel = (ix == i) & (iy == j) & ~np.isnan(nmse)
            if sel.any():
                lin = float(nmse[sel].mean())
                vals = [repr(lin), repr(float(10 * np.log10(lin)))]
            else:
                vals = ["", ""]
            rows.append([method, i, j, repr(float(xe[i])), repr(float(xe[i + 1])), repr(float(ye[j])),
                         repr(float(ye[j + 1])), int(sel.sum())] + vals)
    return rows


# -- similarity study ---------------------------------------------------------------

SIMILARITY_COLUMNS = ("bin_lo", "bin_hi", "n_pairs", "raw_similarity", "feature_similarity")


def similarity_table(cfg: ExperimentConfig, arch: ConvNetArch, clnet: ModelParams, contrastive: Dataset) -> list[list]:
    n = min(cfg.similarity.n_samples, len(contrastive))
    ds = contrastive.subset(np.arange(n))
    bins = cfg.similarity.bins
    pairs = sample_pairs_by_distance(ds.positions, bins, cfg.similarity.pairs_per_bin,
                                     stream(cfg.seed, "similarity-pairs"))
    raw = similarity_curve(ds.y_real, ds.positions, pairs, bins)
    feats = similarity_curve(extract_features(arch, clnet, ds.y_real), ds.positions, pairs, bins)
    dist = np.linalg.norm(ds.positions[pairs[:, 0]] - ds.positions[pairs[:, 1]], axis=1)
    rows = []
    for k, (lo, hi) in enumerate(zip(bins[:-1], bins[1:])):
        count = int(np.sum((dist >= lo) & (dist < hi)))
        rows.append([repr(float(lo)), repr(float(hi)), count,
                     "" if raw[k] is None else repr(raw[k]), "" if feats[k] is None else repr(feats[k])])
    return rows


def cmd_similarity_study(run: Run) -> Path:
    arch, clnet, inputs = _clnet(run)
    inputs.update(run.inputs("data/contrastive"))
    rows = similarity_table(run.cfg, arch, clnet, run.dataset("contrastive"))
    path = write_csv(run.models.root / "results" / "similarity.csv", SIMILARITY_COLUMNS, rows)
    plot_similarity(run.models.root / "results" / "similarity.svg", rows)
    run.models.record("similarity-study", inputs, [path])
    return path


# -- plots (static SVG; CSV is authoritative) ---------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "clmuce"
    return plt


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    import matplotlib.pyplot as plt

    plt.close(fig)
    return path


AXIS_LABELS = {"snr": "SNR (dB)", "pilot": "pilot length L", "labels": "labeled samples", "map": "SNR (dB)"}


def plot_sweep(path: Path, rows: list[list], axis: str) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for method in METHODS:
        pts = [(float(r[1]), float(r[3])) for r in rows if r[0] == method]
        if pts:
            x, yv = zip(*sorted(pts))
            ax.plot(x, yv, marker="o", label=method)
    ax.set_xlabel(AXIS_LABELS[axis])
    ax.set_ylabel("NMSE (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_similarity(path: Path, rows: list[list]) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.6))
    centers = [(float(r[0]) + float(r[1])) / 2 for r in rows]
    for col, label in ((3, "received signal"), (4, "CSI feature")):
        pts = [(c, float(r[col])) for c, r in zip(centers, rows) if r[col] != ""]
        if pts:
            ax.plot(*zip(*pts), marker="o", label=label)
    ax.set_xlabel("distance (m)")
    ax.set_ylabel("standardized similarity")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_map(path: Path, grid_csv: Path, cfg: ExperimentConfig) -> Path:
    plt = _pyplot()
    n = cfg.sweep.map_cells
    img = np.full((n, n), np.nan)
    with open(grid_csv, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["nmse_db"]:
                img[int(r["iy"]), int(r["ix"])] = float(r["nmse_db"])
    xmin, xmax, ymin, ymax = cfg.scene.area
    fig, ax = plt.subplots(figsize=(4.6, 3.8))
    im = ax.imshow(img, origin="lower", extent=(xmin, xmax, ymin, ymax), cmap="viridis")
    fig.colorbar(im, ax=ax, label="NMSE (dB)")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    fig.tight_layout()
    return _save(fig, path)


# -- in-memory benchmark (no files) ------------------------------------------------------

@dataclass
class BenchmarkResult:
    seed: int
    nmse: dict[str, float]  # method -> mean linear NMSE on the test set
    label_nmse: dict[int, dict[str, float]] = field(default_factory=dict)  # n_labels -> method -> NMSE
    seconds: float = 0.0

    def db(self, method: str, n_labels: int | None = None) -> float:
        table = self.nmse if n_labels is None else self.label_nmse[n_labels]
        return float(10 * np.log10(table[method]))


def benchmark(cfg: ExperimentConfig, label_counts=(), baselines: bool = True) -> BenchmarkResult:
    """Every method trained and tested in memory for one seed; ``label_counts`` adds proposed runs on label subsets."""
    t0 = time.perf_counter()
    sets = build_datasets(scene_of(cfg), cfg.system, (cfg.data.n_contrastive, cfg.data.n_downstream, cfg.data.n_test),
                          cfg.data.snr_db, cfg.seed)
    down, test = sets["downstream"], sets["test"]
    arch, clnet, _ = fit_clnet(cfg, sets["contrastive"])

    def proposed(ds: Dataset) -> LoadedModels:
        sep = fit_separate(cfg, arch, clnet, ds)
        jm = fit_joint(cfg, arch, clnet, sep, ds)
        archs = {q: n.arch for q, n in sep.nets.items()}
        return LoadedModels(proposed={
            "joint": AdaptiveModel(arch, jm.clnet, archs, jm.nets, jm.floor, jm.scaler),
            "separate": AdaptiveModel(arch, clnet, archs, {q: n.params for q, n in sep.nets.items()}, sep.floor,
                                      sep.scaler),
        })

    models = proposed(down)
    if baselines:
        sched = cfg.downstream.schedule()
        models.single = single_user_ce_train(down.y_real, down.h, cfg.system, sched, cfg.seed)
        models.location = location_based_ce_train(down.positions, down.y_real, down.h,
                                                  cfg.baselines.location_group_size, cfg.system, sched, cfg.seed)
    result = BenchmarkResult(cfg.seed, {m: float(np.nanmean(v)) for m, v in evaluate_methods(cfg, models, test).items()})
    for n in label_counts:
        sub = proposed(down.subset(np.arange(n)))
        result.label_nmse[n] = {m: float(np.nanmean(v)) for m, v in evaluate_methods(cfg, sub, test).items()}
    result.seconds = time.perf_counter() - t0
    return result
