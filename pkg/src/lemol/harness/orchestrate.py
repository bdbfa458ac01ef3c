"""Collect trajectories, train the opponent model, then evaluate.

Layout under the output directory::

    config.cfg
    collect/<naive-variant>/seed<s>/traj_<m>.ltrj     phase 1
    om/<kind>-<cen|dec>-seed<s>.lmol  (+ _report.csv) phase 2
    runs/<variant>/seed<s>/metrics.csv, om_trace.csv, trajectory.ltrj, agents.lmol

Phase 1 and 2 artefacts are shared by every variant that needs the same kind
of opponent model, so running several variants into one directory trains each
model once.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

from ..agent import AgentVariant, RunResult, run_trajectory, seed_streams, write_metrics_csv
from ..experience import TrajectoryStore, store_write
from ..opponent_model import OmVariant, init_om_params, train_om, write_trace_csv
from ..tensor import ParamStore, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, render_config

ENV_OUT = "LEMOL_OUT"


class PhaseError(RuntimeError):
    def __init__(self, phase: str, message: str):
        super().__init__(f"phase {phase}: {message}")
        self.phase = phase


class OverwriteError(FileExistsError):
    pass


def git_blob_hash(path) -> str:
    """The hash ``git hash-object`` would print for this file."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def output_dir(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(ENV_OUT) or config.experiment.output_dir)


def collection_seed(seed: int, m: int) -> int:
    """Seeds for phase-1 trajectories, disjoint from evaluation seeds below 1000."""
    return 1000 * (seed + 1) + m


def naive_counterpart(variant: AgentVariant) -> AgentVariant:
    return AgentVariant.NAIVE if variant.spec.centralised else AgentVariant.NAIVE_DEC


def om_key(variant: AgentVariant, seed: int) -> str:
    side = "cen" if variant.spec.centralised else "dec"
    return f"{variant.spec.om.value}-{side}-seed{seed}"


@dataclass
class Orchestrator:
    config: ExperimentConfig
    root: Path
    force: bool = False
    log: Callable[[str], None] = lambda msg: None

    @classmethod
    def create(cls, config: ExperimentConfig, force: bool = False, log=None) -> "Orchestrator":
        return cls(config, output_dir(config), force, log or (lambda msg: None))

    # -- guarded writes ---------------------------------------------------------

    def _claim(self, path: Path) -> Path:
        if path.exists() and not self.force:
            raise OverwriteError(f"{path} exists; pass --force to overwrite")
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def _write_config(self) -> None:
        path = self.root / "config.cfg"
        text = render_config(self.config)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.exists() and not self.force:
            # runs of other variants may share the directory; everything else must match
            old = path.read_text()
            if _without_variant(old) != _without_variant(text):
                raise OverwriteError(f"{path} holds a different configuration; pass --force to overwrite")
        path.write_text(text)

    # -- phases -----------------------------------------------------------------

    def collect(self, seed: int) -> list:
        variant = naive_counterpart(self.config.variant)
        M = self.config.experiment.om_trajectories
        store = TrajectoryStore(self.root / "collect" / variant.label / f"seed{seed}")
        if len(store.paths()) == M and not self.force:
            self.log(f"[collect] seed {seed}: reusing {M} stored trajectories")
            return store.read_all()
        records = []
        for m in range(M):
            self.log(f"[collect] seed {seed}: trajectory {m + 1}/{M} ({variant.label})")
            res = run_trajectory(variant, self.config.run_config(), collection_seed(seed, m),
                                 run_id=f"collect-{seed}-{m}")
            path = self._claim(store.root / f"traj_{m:03d}.ltrj")
            store_write(path, res.record)
            records.append(res.record)
        return records

    def trained_om(self, seed: int) -> tuple[ParamStore, Path | None]:
        variant = self.config.variant
        kind = variant.spec.om
        params = init_om_params(seed_streams(seed)["om_init"], self.config.om)
        if kind not in (OmVariant.FULL, OmVariant.ABLATED):
            return params, None
        if self.config.experiment.om_trajectories == 0:
            self.log(f"[train-om] seed {seed}: no trajectories, keeping the untrained model")
            return params, None
        ckpt = self.root / "om" / f"{om_key(variant, seed)}.lmol"
        if ckpt.exists() and not self.force:
            load_checkpoint(ckpt, {"om": params})
            self.log(f"[train-om] seed {seed}: reusing {ckpt.name}")
            return params, ckpt
        records = self.collect(seed)
        if not records or any(r.num_episodes == 0 for r in records):
            raise PhaseError("collect", f"seed {seed}: no usable trajectories were collected")
        self.log(f"[train-om] seed {seed}: {kind.value} model on {len(records)} trajectories")
        om_hyper = replace(self.config.om, seed=self.config.om.seed + seed)
        try:
            report = train_om(records, params, om_hyper, kind)
        except ValueError as exc:
            raise PhaseError("train-om", str(exc)) from exc
        save_checkpoint(self._claim(ckpt), {"om": params})
        report.write_csv(self._claim(ckpt.with_name(ckpt.stem + "_report.csv")))
        return params, ckpt

    def evaluate(self, seed: int) -> RunResult:
        variant = self.config.variant
        om, ckpt = self.trained_om(seed) if variant.has_om else (None, None)
        run_dir = self.root / "runs" / variant.label / f"seed{seed}"
        metrics_path = self._claim(run_dir / "metrics.csv")
        self.log(f"[evaluate] seed {seed}: {variant.label}, {self.config.experiment.episodes} episodes")
        res = run_trajectory(variant, self.config.run_config(), seed, om_params=om, run_id=f"{variant.label}-{seed}")
        agents = self._claim(run_dir / "agents.lmol")
        save_checkpoint(agents, {"defender_" + k: v for k, v in res.defender.maddpg.stores().items()}
                        | {"attacker_" + k: v for k, v in res.attacker.stores().items()})
        store_write(self._claim(run_dir / "trajectory.ltrj"), res.record)
        if res.om_trace:
            write_trace_csv(self._claim(run_dir / "om_trace.csv"), res.om_trace)
        comment = (f"config_hash={self.config.hash()} variant={variant.label} seed={seed} "
                   f"om_checkpoint={git_blob_hash(ckpt) if ckpt else 'none'} "
                   f"agent_checkpoint={git_blob_hash(agents)}")
        write_metrics_csv(metrics_path, res.metrics, comment)
        return res

    def run(self, workers: int = 1) -> dict[int, RunResult]:
        self._write_config()
        seeds = self.config.experiment.seeds
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                return dict(zip(seeds, pool.map(self.evaluate, seeds)))
        return {s: self.evaluate(s) for s in seeds}


def _without_variant(text: str) -> str:
    return "\n".join(ln for ln in text.splitlines() if not ln.startswith("variant ="))


def orchestrate(config: ExperimentConfig, force: bool = False, log=None, workers: int = 1) -> dict[int, RunResult]:
    """Phases 1-3 for every configured seed; returns the evaluation results."""
    return Orchestrator.create(config, force, log).run(workers)
