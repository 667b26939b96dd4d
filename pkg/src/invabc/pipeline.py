"""Stage orchestration with a JSON run manifest.

Each stage reads upstream files from the run directory, writes its own, and
records sha256 digests of both in ``manifest.json``. A stage whose inputs and
config are unchanged since its last recorded run, and whose outputs are intact,
is skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from dataclasses import replace
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import lssvr
from .abcpmc import (
    AcceptanceRateError,
    Prior,
    format_summary_table,
    run_npmc,
    worker_count,
    write_posterior_csv,
    write_traces_csv,
)
from .config import RunConfig, resolved_dict
from .csvio import read_matrix, read_table, write_table
from .design import DesignTable, lhd_sample
from .forming_sim import SimConfig, classify_elements, render_fld_image, simulate, punch_image
from .imaging import apply_mask, build_mask, green_mask, load_png, reconstruct_objective, save_png, ssim
from .tensor_nn import CheckpointError
from .vae import TrainingDivergence, VaeModel, as_unit_image, to_uint8, train, write_latents

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4

STAGES = ["design", "simulate", "build-objective", "train-vae", "fit-surrogate", "validate", "infer", "report"]


class MissingArtifact(RuntimeError):
    def __init__(self, stage: str, path: str):
        super().__init__(f"missing upstream artifact {path!r}; run the {stage!r} stage first")
        self.stage = stage
        self.path = path


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# digests and manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_digest(path) -> str:
    """Digest of a file, or of every file below a directory keyed by relative path."""
    path = Path(path)
    if path.is_file():
        return file_digest(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f.relative_to(path).as_posix().encode())
        h.update(b"\0")
        h.update(file_digest(f).encode())
        h.update(b"\n")
    return h.hexdigest()


class Run:
    """One run directory plus its manifest."""

    def __init__(self, cfg: RunConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        self.manifest = self._load_manifest()

    def _load_manifest(self) -> dict:
        fresh = {
            "tool_version": __version__,
            "config_hash": self.cfg.digest(),
            "simulator_config_hash": self.cfg.sim.digest(),
            "stages": {},
        }
        if self.manifest_path.exists():
            old = json.loads(self.manifest_path.read_text())
            fresh["stages"] = old.get("stages", {})
        return fresh

    def _save_manifest(self) -> None:
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def path(self, rel: str) -> Path:
        return self.out / rel

    def execute(self, name: str, inputs: dict[str, str], body) -> bool:
        """Run ``body`` unless the stage is up to date. Returns True if it ran.

        ``inputs`` maps relative path -> producing stage. ``body`` returns the list
        of relative output paths.
        """
        digests = {}
        for rel, producer in sorted(inputs.items()):
            p = self.path(rel)
            if not p.exists():
                raise MissingArtifact(producer, rel)
            recorded = self.manifest["stages"].get(producer, {}).get("outputs", {})
            if producer in self.manifest["stages"] and rel in recorded and recorded[rel] != tree_digest(p):
                log.warning("%s changed since the %s stage recorded it", rel, producer)
            digests[rel] = tree_digest(p)
        cfg_hash = self.cfg.digest()
        rec = self.manifest["stages"].get(name)
        if rec and rec["inputs"] == digests and rec["config_hash"] == cfg_hash:
            intact = all(self.path(r).exists() and tree_digest(self.path(r)) == d for r, d in rec["outputs"].items())
            if intact:
                log.info("stage %s is up to date", name)
                return False
        log.info("running stage %s", name)
        started = time.time()
        outputs = body()
        self.manifest["stages"][name] = {
            "inputs": digests,
            "config_hash": cfg_hash,
            "outputs": {r: tree_digest(self.path(r)) for r in sorted(outputs)},
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "elapsed_s": round(time.time() - started, 3),
        }
        self.manifest["config_hash"] = cfg_hash
        self._save_manifest()
        return True


def _reset_dir(path: Path) -> None:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)


# ---------------------------------------------------------------------------
# design


def augment_files(run: Run) -> list[Path]:
    return sorted(run.path("augment").glob("round_*.csv"))


def stage_design(run: Run) -> bool:
    cfg = run.cfg
    extra = {f"augment/{p.name}": "validate" for p in augment_files(run)}

    def body():
        train_design = lhd_sample(cfg.n_train, cfg.space, cfg.seed)
        for p in augment_files(run):
            train_design = train_design.merged(DesignTable.read_csv(p))
        test_design = lhd_sample(cfg.n_test, cfg.space, cfg.seed + 1)
        # test ids continue after every id the training design can reach
        test_design.ids = [1_000_000 + i for i in range(len(test_design))]
        train_design.write_csv(run.path("design/train.csv"))
        test_design.write_csv(run.path("design/test.csv"))
        write_table(run.path("design/resolved_config.csv"), ["key", "value"],
                    [("config", json.dumps(resolved_dict(cfg), sort_keys=True))])
        return ["design/train.csv", "design/test.csv", "design/resolved_config.csv"]

    return run.execute("design", extra, body)


# ---------------------------------------------------------------------------
# simulate


def working_mask(sim: SimConfig) -> np.ndarray:
    return build_mask(punch_image(sim), sim.punch_color_low)


def simulate_row(theta, space, sim: SimConfig, mask: np.ndarray):
    """Strain field, raw FLD image and the masked (processed) image for one design row."""
    field = simulate(theta, space, sim)
    labels = classify_elements(field, sim.flc)
    raw = render_fld_image(labels, sim, masked=False)
    return field, labels, raw, apply_mask(raw, mask)


def simulate_design(design: DesignTable, space, sim: SimConfig, out_dir, workers: int | None = None) -> list[tuple[int, str]]:
    """Write raw/processed PNGs and field CSVs for every row; returns ``(sample_id, error)`` failures."""
    out_dir = Path(out_dir)
    mask = working_mask(sim)

    def one(k):
        sid = design.ids[k]
        try:
            field, _, raw, processed = simulate_row(design.theta[k], space, sim, mask)
        except Exception as exc:  # recorded, the run continues
            return sid, f"{type(exc).__name__}: {exc}"
        save_png(raw, out_dir / "raw" / f"{sid:07d}.png")
        save_png(processed, out_dir / "processed" / f"{sid:07d}.png")
        field.write_csv(out_dir / "fields" / f"{sid:07d}.csv")
        return None

    n = len(design)
    workers = worker_count(workers)
    if workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, range(n)))
    else:
        results = [one(k) for k in range(n)]
    return [r for r in results if r is not None]


def stage_simulate(run: Run) -> bool:
    cfg = run.cfg
    inputs = {"design/train.csv": "design", "design/test.csv": "design"}
    failures: list = []

    def body():
        _reset_dir(run.path("sim"))
        save_png(working_mask(cfg.sim), run.path("sim/mask.png"))
        for part in ("train", "test"):
            design = DesignTable.read_csv(run.path(f"design/{part}.csv"))
            fails = simulate_design(design, cfg.space, cfg.sim, run.path(f"sim/{part}"))
            failures.extend((part, sid, err) for sid, err in fails)
        write_table(run.path("sim/failures.csv"), ["set", "sample_id", "error"], failures)
        return ["sim"]

    ran = run.execute("simulate", inputs, body)
    if not ran:
        _, rows = read_table(run.path("sim/failures.csv"))
        failures = rows
    if failures:
        raise NumericalFailure(f"{len(failures)} simulator row(s) failed; see sim/failures.csv")
    return ran


def load_processed(run: Run, part: str) -> tuple[DesignTable, np.ndarray]:
    design = DesignTable.read_csv(run.path(f"design/{part}.csv"))
    imgs = [load_png(run.path(f"sim/{part}/processed/{sid:07d}.png")) for sid in design.ids]
    size = run.cfg.sim.image_size
    return design, np.stack(imgs) if imgs else np.zeros((0, size, size, 3), np.uint8)


# ---------------------------------------------------------------------------
# objective


def objective_coverage(image: np.ndarray, region: np.ndarray, green) -> tuple[float, float]:
    """Green fraction over the whole image and over the working region."""
    g = green_mask(image, green)
    return float(g.mean()), float(g[region].mean()) if region.any() else 0.0


def stage_build_objective(run: Run) -> bool:
    cfg = run.cfg
    inputs = {"sim": "simulate", "design/train.csv": "design"}

    def body():
        mask = working_mask(cfg.sim)
        region = np.all(mask == 0, axis=-1)
        if cfg.objective_mode == "planted":
            _, _, _, image = simulate_row(np.array(cfg.theta_star), cfg.space, cfg.sim, mask)
            n_used = 1
            write_table(run.path("objective/planted_theta.csv"), cfg.space.names, [cfg.theta_star])
        else:
            _, imgs = load_processed(run, "train")
            if len(imgs) == 0:
                raise ValueError("no processed training images to build the objective from")
            image = reconstruct_objective(list(imgs), cfg.green).image
            n_used = len(imgs)
        save_png(image, run.path("objective/objective.png"))
        frac, frac_region = objective_coverage(image, region, cfg.green)
        write_table(
            run.path("objective/coverage.csv"),
            ["mode", "n_images", "green_fraction", "green_fraction_region"],
            [(cfg.objective_mode, n_used, frac, frac_region)],
        )
        outs = ["objective/objective.png", "objective/coverage.csv"]
        if cfg.objective_mode == "planted":
            outs.append("objective/planted_theta.csv")
        return outs

    return run.execute("build-objective", inputs, body)


# ---------------------------------------------------------------------------
# VAE and surrogate


def stage_train_vae(run: Run) -> bool:
    cfg = run.cfg
    inputs = {"sim": "simulate", "objective/objective.png": "build-objective", "design/train.csv": "design"}

    def body():
        design, imgs = load_processed(run, "train")
        objective = load_png(run.path("objective/objective.png"))
        try:
            model, tlog, zs, zo = train(imgs, objective, cfg.vae, progress=True)
        except TrainingDivergence as exc:
            raise NumericalFailure(str(exc)) from exc
        model.save(run.path("vae/model.ckpt"))
        tlog.write_csv(run.path("vae/train_log.csv"))
        write_latents(run.path("vae/zs.csv"), zs, design.ids)
        write_latents(run.path("vae/zo.csv"), zo[None], ["objective"])
        return ["vae/model.ckpt", "vae/train_log.csv", "vae/zs.csv", "vae/zo.csv"]

    return run.execute("train-vae", inputs, body)


def surrogate_grid(run: Run) -> list[tuple[float, float]]:
    root = np.sqrt(run.cfg.space.dim)
    return [(f * root, g) for f in run.cfg.lssvr.bandwidth_factors for g in run.cfg.lssvr.gamma_grid]


def stage_fit_surrogate(run: Run) -> bool:
    cfg = run.cfg
    inputs = {"vae/zs.csv": "train-vae", "design/train.csv": "design"}

    def body():
        design = DesignTable.read_csv(run.path("design/train.csv"))
        _, zs = read_matrix(run.path("vae/zs.csv"), skip_cols=1)
        bounds = (cfg.space.lower, cfg.space.upper)
        bw, g = lssvr.select_hyperparams(design.theta, zs, surrogate_grid(run), cfg.lssvr.folds, cfg.seed, bounds)
        model = lssvr.fit_multi(design.theta, zs, g, lssvr.KernelSpec("RBF", bw), bounds)
        model.save(run.path("surrogate"))
        write_table(run.path("surrogate/selection.csv"), ["bandwidth", "gamma_reg"], [(bw, g)])
        return ["surrogate"]

    return run.execute("fit-surrogate", inputs, body)


def load_vae(run: Run) -> VaeModel:
    try:
        return VaeModel.load(run.path("vae/model.ckpt"))
    except (CheckpointError, FileNotFoundError) as exc:
        raise MissingArtifact("train-vae", "vae/model.ckpt") from exc


# ---------------------------------------------------------------------------
# validation


def pseudo_image_ssim(model: VaeModel, z: np.ndarray, images: np.ndarray) -> np.ndarray:
    """SSIM between decoded latent rows and the matching images."""
    decoded = to_uint8(model.decode(z)) if len(z) else np.zeros((0,) + model.image_shape, np.uint8)
    return np.array([ssim(d, img) for d, img in zip(decoded, images)])


def stage_validate(run: Run) -> dict:
    cfg = run.cfg
    inputs = {"surrogate": "fit-surrogate", "vae/model.ckpt": "train-vae", "vae/zs.csv": "train-vae",
              "sim": "simulate", "design/test.csv": "design", "design/train.csv": "design"}

    def body():
        model = load_vae(run)
        surrogate = lssvr.load_bundle(run.path("surrogate"))
        test, test_imgs = load_processed(run, "test")
        z_hat = surrogate.predict(test.theta) if len(test) else np.zeros((0, model.latent_dim))
        scores = pseudo_image_ssim(model, z_hat, test_imgs)
        write_table(run.path("validate/ssim.csv"), ["sample_id", "ssim"], zip(test.ids, scores))
        z_enc = model.encode_means(as_unit_image(test_imgs)) if len(test) else z_hat
        latent_err = np.sqrt(np.sum((z_hat - z_enc) ** 2, axis=1))

        # in-sample consistency on the training set
        train_design, train_imgs = load_processed(run, "train")
        _, zs = read_matrix(run.path("vae/zs.csv"), skip_cols=1)
        s_sur = pseudo_image_ssim(model, surrogate.predict(train_design.theta), train_imgs)
        s_rec = pseudo_image_ssim(model, zs, train_imgs)
        write_table(run.path("validate/in_sample.csv"), ["sample_id", "ssim_surrogate", "ssim_reconstruction"],
                    zip(train_design.ids, s_sur, s_rec))

        mean_ssim = float(np.mean(scores)) if len(scores) else 1.0
        passed = mean_ssim >= cfg.ssim_threshold
        rounds = len(augment_files(run))
        emitted = None
        if not passed and rounds < cfg.max_augment:
            k = rounds + 1
            extra = lhd_sample(cfg.augment_count, cfg.space, cfg.seed + 1000 + k)
            extra.kind = "augment"
            emitted = f"augment/round_{k}.csv"
            extra.write_csv(run.path(emitted))
        result = {
            "mean_ssim": mean_ssim,
            "min_ssim": float(np.min(scores)) if len(scores) else 1.0,
            "threshold": cfg.ssim_threshold,
            "passed": bool(passed),
            "n_test": len(scores),
            "n_train": len(train_design),
            "augment_rounds": rounds,
            "augmentation_emitted": emitted,
            "latent_error_median": float(np.median(latent_err)) if len(latent_err) else 0.0,
        }
        run.path("validate/result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        outs = ["validate/ssim.csv", "validate/in_sample.csv", "validate/result.json"]
        return outs + ([emitted] if emitted else [])

    run.execute("validate", inputs, body)
    return json.loads(run.path("validate/result.json").read_text())


# ---------------------------------------------------------------------------
# inference


def resolve_epsilon_stop(run: Run) -> float:
    if run.cfg.epsilon_stop != "auto":
        return float(run.cfg.epsilon_stop)
    p = run.path("validate/result.json")
    if not p.exists():
        raise MissingArtifact("validate", "validate/result.json")
    return float(json.loads(p.read_text())["latent_error_median"])


def stage_infer(run: Run) -> bool:
    cfg = run.cfg
    inputs = {"surrogate": "fit-surrogate", "vae/zo.csv": "train-vae"}
    if cfg.epsilon_stop == "auto":
        inputs["validate/result.json"] = "validate"

    def body():
        surrogate = lssvr.load_bundle(run.path("surrogate"))
        _, zo = read_matrix(run.path("vae/zo.csv"), skip_cols=1)
        abc_cfg = replace(cfg.abc, epsilon_stop=resolve_epsilon_stop(run))
        try:
            summary = run_npmc(Prior.from_space(cfg.space), surrogate.predict, zo[0], abc_cfg)
        except (AcceptanceRateError, FloatingPointError) as exc:
            raise NumericalFailure(str(exc)) from exc
        write_posterior_csv(run.path("infer/posterior.csv"), summary, cfg.space.names)
        write_traces_csv(run.path("infer/traces.csv"), summary)
        run.path("infer/summary.txt").write_text(format_summary_table(cfg.space.names, summary.mean, summary.std))
        return ["infer/posterior.csv", "infer/traces.csv", "infer/summary.txt"]

    return run.execute("infer", inputs, body)


def read_final_posterior(path, names) -> tuple[np.ndarray, np.ndarray]:
    """Particles and normalized weights of the last generation in a posterior CSV."""
    header, data = read_matrix(path)
    if len(data) == 0:
        raise ValueError(f"{path}: no particles")
    gen = data[:, header.index("generation")]
    last = data[gen == gen.max()]
    theta = last[:, [header.index(n) for n in names]]
    w = last[:, header.index("weight")]
    return theta, w / w.sum()


def stage_report(run: Run) -> bool:
    from . import report

    inputs = {"infer/posterior.csv": "infer", "infer/traces.csv": "infer"}

    def body():
        return report.write_report(run)

    return run.execute("report", inputs, body)


# ---------------------------------------------------------------------------
# drivers

STAGE_FUNCS = {
    "design": stage_design,
    "simulate": stage_simulate,
    "build-objective": stage_build_objective,
    "train-vae": stage_train_vae,
    "fit-surrogate": stage_fit_surrogate,
    "validate": stage_validate,
    "infer": stage_infer,
    "report": stage_report,
}


def run_stage(name: str, cfg: RunConfig, out) -> int:
    run = Run(cfg, out)
    result = STAGE_FUNCS[name](run)
    if name == "validate" and not result["passed"]:
        log.warning(
            "validation failed: mean SSIM %.4f < %.4f (%s)",
            result["mean_ssim"], result["threshold"],
            result["augmentation_emitted"] or "augmentation cap reached",
        )
        return EXIT_VALIDATION
    return EXIT_OK


def run_all(cfg: RunConfig, out) -> int:
    """Every stage in order, looping back through design while validation fails and rounds remain."""
    run = Run(cfg, out)
    while True:
        for name in STAGES[:5]:
            STAGE_FUNCS[name](run)
        result = stage_validate(run)
        if result["passed"]:
            break
        if not result["augmentation_emitted"]:
            log.warning("validation failed after %d augmentation round(s)", result["augment_rounds"])
            return EXIT_VALIDATION
        log.info("validation mean SSIM %.4f; retraining with %s", result["mean_ssim"], result["augmentation_emitted"])
    stage_infer(run)
    stage_report(run)
    return EXIT_OK
