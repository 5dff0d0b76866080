"""Stage orchestration for one run directory.

A run directory holds the SNFL arrays of every finished stage plus
``manifest.json``. Stages can be run one by one (the CLI subcommands) or
all together; each stage reloads what it needs from disk, so a failed run
keeps the outputs of the stages that completed.
"""

from __future__ import annotations

import csv
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import ExperimentConfig, load_config
from .container import load_array, load_image, load_sequence, save_array, save_sequence
from .correct import (
    CorrectionResult,
    IdentityProjector,
    SplineProjector,
    correct_motion,
    rigid_init,
    rigid_refine,
)
from .deform import synth_motion, synth_sequence
from .errors import ConfigError, SenseflowError, StageError
from .estimate import estimate_motion
from .forward import MotionProblem, add_noise, build_problem, forward, forward_continuous, synth_coils
from .gradients import grad_U, hessian_diag, precondition
from .manifest import MANIFEST_NAME, RunManifest, read_json
from .metrics import MetricReport, evaluate, static_incompatibility
from .models import DeformationSequence, GridSpec, Image, KSpaceData, MotionTiming
from .phantoms import make_phantom
from .recon import ReconConfig, per_excitation_recons, reconstruct
from .render import metrics_table, render_text, report_table, save_field, save_gradient_map, save_image
from .rng import Rng
from .sampling import radial_trajectory

logger = logging.getLogger(__name__)

REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"
HISTORY_CSV = "correction_history.csv"
RIGID_CSV = "rigid_status.csv"
TIMED_STAGES = ("per_excitation", "estimate", "correct")


@dataclass
class Dataset:
    problem: MotionProblem       # carries the noisy data
    s_ref: Image
    U_ref: DeformationSequence
    clean: KSpaceData


def build_acquisition(config: ExperimentConfig) -> tuple[MotionProblem, Image]:
    """Geometry, coils and reference image for ``config`` (no data yet)."""
    grid = GridSpec(config.n)
    rng = Rng(config.seed)
    s_ref = make_phantom(config.phantom, grid, rng)
    trajectory = radial_trajectory(config.n_spokes, config.readout, grid)
    coils = synth_coils(config.n_coils, grid, rng)
    problem = build_problem(grid, trajectory, config.n_exc, coils, config.sampling, config.dcf_iters)
    return problem, s_ref


def simulate_data(config: ExperimentConfig) -> Dataset:
    problem, s_ref = build_acquisition(config)
    rng = Rng(config.seed)
    grid = problem.grid
    if config.motion_timing is MotionTiming.SPOKE:
        steps = config.n_spokes
        times = np.arange(steps) / max(steps - 1, 1)
        states = synth_motion(config.motion, rng, times, grid)
        per_exc = config.spokes_per_excitation
        U_ref = DeformationSequence(tuple(states[i * per_exc] for i in range(config.n_exc)))
        clean = forward_continuous(states, s_ref, problem)
    else:
        U_ref = synth_sequence(config.motion, rng, config.n_exc, grid)
        clean = forward(U_ref, s_ref, problem)
    noisy = add_noise(clean, config.noise_level, rng)
    return Dataset(problem.with_data(noisy), s_ref, U_ref, clean)


def _write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c) for c in columns})


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as f:
        return list(csv.DictReader(f))


REPORT_COLUMNS = ("name", "res", "ssim", "psnr", "mse", "deformation_rmse", "noise_level",
                  "static_incompatibility")


class Run:
    """One experiment's run directory and its stages."""

    def __init__(self, config: ExperimentConfig, run_dir: Path | None = None,
                 manifest: RunManifest | None = None) -> None:
        self.config = config
        self.run_dir = Path(run_dir) if run_dir is not None else config.run_dir()
        self.manifest = manifest or RunManifest(config.to_dict())
        self.manifest.config = config.to_dict()

    @classmethod
    def open(cls, run_dir: Path, **overrides) -> Run:
        """Reopen a run from its manifest, optionally overriding config values."""
        run_dir = Path(run_dir)
        data = read_json(run_dir / MANIFEST_NAME)
        if data is None:
            raise ConfigError(f"{run_dir} has no readable {MANIFEST_NAME}")
        manifest = RunManifest.from_dict(data)
        config = load_config(run_dir / MANIFEST_NAME)
        if overrides:
            config = config.replace(**overrides)
        return cls(config, run_dir, manifest)

    # -- storage -----------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.run_dir / f"{name}.snfl"

    def has(self, name: str) -> bool:
        return self.path(name).exists()

    def save(self, name: str, value) -> None:
        if isinstance(value, DeformationSequence):
            save_sequence(self.path(name), value)
        else:
            save_array(self.path(name), value)
        self.manifest.add_array(self.path(name).name)

    def image(self, name: str) -> Image:
        return load_image(self.path(name))

    def sequence(self, name: str) -> DeformationSequence:
        return load_sequence(self.path(name))

    def save_manifest(self) -> None:
        self.manifest.save(self.run_dir)

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        try:
            with self.manifest.stage(name):
                yield
        except StageError:
            raise
        except (SenseflowError, OSError, ValueError, ArithmeticError) as exc:
            logger.error("stage %s failed: %s", name, exc)
            raise StageError(name, exc) from exc
        finally:
            try:
                self.save_manifest()
            except OSError:
                logger.warning("could not update the manifest after stage %s", name)

    # -- data --------------------------------------------------------------

    @cached_property
    def dataset(self) -> Dataset:
        problem, _ = build_acquisition(self.config)
        values = load_array(self.path("y"), np.complex128)
        clean = load_array(self.path("y_clean"), np.complex128)
        y = KSpaceData(values, problem.support, problem.path, self.config.noise_level)
        return Dataset(
            problem.with_data(y),
            self.image("s_ref"),
            self.sequence("U_ref"),
            KSpaceData(clean, problem.support, problem.path),
        )

    @property
    def problem(self) -> MotionProblem:
        return self.dataset.problem

    # -- stages ------------------------------------------------------------

    def simulate(self) -> Dataset:
        with self.stage("simulate"):
            data = simulate_data(self.config)
            self.save("s_ref", data.s_ref)
            self.save("U_ref", data.U_ref)
            self.save("coils", data.problem.coils.maps)
            self.save("trajectory", data.problem.trajectory.coords)
            self.save("y_clean", data.clean.values)
            self.save("y", data.problem.data.values)
            self.__dict__["dataset"] = data
        logger.info("simulated %d excitations x %d spokes, %d coils (%s path)",
                    self.config.n_exc, self.config.spokes_per_excitation, self.config.n_coils,
                    self.config.sampling.value)
        return data

    def per_excitation(self) -> list[Image]:
        with self.stage("per_excitation"):
            images = per_excitation_recons(self.problem)
            self.save("s_exc", np.stack([s.values for s in images]))
        return images

    def _excitation_images(self) -> list[Image]:
        if not self.has("s_exc"):
            return self.per_excitation()
        stacked = load_array(self.path("s_exc"), np.float64)
        grid = GridSpec(stacked.shape[-1])
        return [Image(grid, v) for v in stacked]

    def estimate(self) -> DeformationSequence:
        images = self._excitation_images()
        with self.stage("estimate"):
            U_est = estimate_motion(images, self.config.estimate)
            self.save("U_est", U_est)
        return U_est

    def _estimate(self) -> DeformationSequence:
        return self.sequence("U_est") if self.has("U_est") else self.estimate()

    def correct(self) -> CorrectionResult:
        U_est = self._estimate()
        projector = SplineProjector(self.config.correct.spacing) if self.config.projector == "spline" \
            else IdentityProjector()
        with self.stage("correct"):
            result = correct_motion(self.problem, U_est, self.config.correct, projector)
            self.save("U_cor", result.U)
            self.save("s_cor", result.s)
            _write_csv(
                self.run_dir / HISTORY_CSV,
                [vars(step) for step in result.history],
                ("level", "round", "objective_cg", "objective_step", "accepted"),
            )
        return result

    def rigid(self) -> None:
        U_est = self._estimate()
        with self.stage("rigid"):
            mask = self.dataset.s_ref.values > 0
            result = rigid_refine(self.problem, rigid_init(U_est, mask))
            self.save("U_rigid", result.U)
            self.save("s_rigid", result.s)
            rows = [
                {"excitation": i, "theta_deg": float(np.rad2deg(p.theta)), "shift_x": p.shift_x,
                 "shift_y": p.shift_y, "status": st.value}
                for i, (p, st) in enumerate(zip(result.params, result.status))
            ]
            _write_csv(self.run_dir / RIGID_CSV, rows, ("excitation", "theta_deg", "shift_x", "shift_y", "status"))
        if result.flagged:
            logger.warning("rigid refinement did not converge for excitations %s", result.flagged)

    def reconstruct(self) -> Image:
        """Static, estimated-motion and final (+TV) reconstructions."""
        problem, cfg = self.problem, self.config.recon
        U_final = self.sequence("U_cor") if self.has("U_cor") else self._estimate()
        with self.stage("reconstruct"):
            identity = DeformationSequence.identity(problem.grid, problem.n_exc)
            plain = ReconConfig(cfg.n_cg, cfg.tolerance, cfg.positivity)
            self.save("s_static", reconstruct(problem, identity, plain).s)
            if self.has("U_est"):
                self.save("s_est", reconstruct(problem, self.sequence("U_est"), plain).s)
            final = reconstruct(problem, U_final, cfg).s
            self.save("s_final", final)
        return final

    def evaluate(self) -> list[MetricReport]:
        data = self.dataset
        problem, ref = data.problem, data.s_ref
        with self.stage("evaluate"):
            identity = DeformationSequence.identity(problem.grid, problem.n_exc)
            incompatibility = static_incompatibility(problem)
            candidates = [
                ("static", "s_static", None),
                ("rigid", "s_rigid", "U_rigid"),
                ("estimate", "s_est", "U_est"),
                ("estimate+correct", "s_cor", "U_cor"),
            ]
            if self.config.recon.tv_lambda > 0:
                candidates.append(("+TV", "s_final", "U_cor"))
            rows = []
            for name, image, field in candidates:
                if not self.has(image) or (field is not None and not self.has(field)):
                    continue
                U = identity if field is None else self.sequence(field)
                rows.append(evaluate(name, problem, U, self.image(image), ref, data.U_ref, incompatibility))
            _write_csv(self.run_dir / REPORT_CSV, [r.as_row() for r in rows], REPORT_COLUMNS)
            text = render_text(metrics_table(rows, title=self.config.name))
            (self.run_dir / REPORT_TXT).write_text(text)
            self.render_panels()
        return rows

    def render_panels(self) -> None:
        """PNG previews windowed by the reference image range."""
        data = self.dataset
        window = (0.0, float(data.s_ref.values.max()) or 1.0)
        for name in ("s_ref", "s_static", "s_est", "s_cor", "s_final", "s_rigid"):
            if self.has(name):
                save_image(self.run_dir / f"{name}.png", self.image(name), window)
        last = self.config.n_exc - 1
        scale = max(float(np.hypot(*data.U_ref[last].displacement).max()), 1e-12)
        for name in ("U_ref", "U_est", "U_cor", "U_rigid"):
            if self.has(name):
                save_field(self.run_dir / f"{name}.png", self.sequence(name)[last], scale)
        if self.has("U_est") and self.has("s_est"):
            U, s = self.sequence("U_est"), self.image("s_est")
            g = grad_U(data.problem, U, s)
            step = precondition(g, hessian_diag(data.problem, U, s))
            save_gradient_map(self.run_dir / "grad_y.png", g.gy[last])
            save_gradient_map(self.run_dir / "precond_grad_y.png", step.gy[last])

    def run_all(self, baseline: str | None = None) -> list[MetricReport]:
        self.simulate()
        self.per_excitation()
        self.estimate()
        if baseline == "rigid":
            self.rigid()
        self.correct()
        self.reconstruct()
        return self.evaluate()


def merge_reports(run_dirs: Sequence[Path]) -> tuple[list[dict], list[str]]:
    """Rows of every run's report with the config name and stage timings attached."""
    rows = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        report = run_dir / REPORT_CSV
        if not report.exists():
            raise FileNotFoundError(f"{report} does not exist")
        manifest = RunManifest.load(run_dir)
        config_name = (manifest.config.get("name") if manifest else None) or run_dir.name
        timings = {f"t_{k}": manifest.stages[k].seconds
                   for k in TIMED_STAGES if manifest and k in manifest.stages}
        for row in _read_csv(report):
            rows.append({"config": config_name, **row, **timings})
    rows.sort(key=lambda r: r["config"])
    columns = ["config", *REPORT_COLUMNS, *(f"t_{k}" for k in TIMED_STAGES)]
    return rows, columns


def write_comparison(run_dirs: Sequence[Path], out_dir: Path) -> str:
    rows, columns = merge_reports(run_dirs)
    _write_csv(Path(out_dir) / REPORT_CSV, rows, columns)
    text = render_text(report_table(rows, columns, title="Comparison"))
    (Path(out_dir) / REPORT_TXT).write_text(text)
    return text
