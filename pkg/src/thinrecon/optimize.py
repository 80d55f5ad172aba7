"""The silhouette-fitting optimization loop.

Fits grid field values (and optionally vertex offsets) so that the extracted
mesh's soft silhouettes match the binary masks, with uniform-Laplacian
smoothing on the mesh and sign-consistency pressure on the field. Plain Adam,
a one-decade exponential learning-rate decay, and seeded view batching keep
runs reproducible bit for bit.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from .dataprep import View, view_at_res
from .errors import NumericalError
from .regularize import laplacian_loss, sdf_sign_loss
from .softsil import (RasterSettings, accumulate_offset_grads,
                      accumulate_sdf_grads, backward_silhouette,
                      silhouette_loss, soft_coverage)
from .tetgrid import SdfField, TetGrid, make_tet_grid, marching_tets
from .validation import check_views

_INIT_RADIUS = 0.4
_INIT_NOISE = 0.01


@dataclass
class TrainConfig:
    """Hyperparameters of a reconstruction run (defaults are the fast preset)."""

    grid_res: int = 64
    train_res: int = 128
    iters: int = 1000
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_lap: float = 0.5
    lambda_sdf: float = 0.2
    batch_views: int = 4
    gamma: float = 1.0
    offsets_enabled: bool = False
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.grid_res < 2:
            raise ValueError("grid_res must be at least 2")
        if self.train_res < 8:
            raise ValueError("train_res must be at least 8")
        if self.iters < 1:
            raise ValueError("iters must be positive")
        for name in ("lr", "gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda_lap", "lambda_sdf"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_views < 1:
            raise ValueError("batch_views must be positive")
        return self


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """One Adam update; mutates state, returns the new parameters."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(
            f"params {params.shape} and grads {grads.shape} differ in shape")
    if not np.all(np.isfinite(grads)):
        raise NumericalError(
            f"{int((~np.isfinite(grads)).sum())} non-finite gradient entries")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_schedule(lr0: float, step: int, total: int) -> float:
    """Exponential decay spanning one decade over the run."""
    return lr0 * 10.0 ** (-step / total)


def init_sdf(grid: TetGrid, seed: int,
             offsets_enabled: bool = False) -> SdfField:
    """Sphere of radius 0.4 plus small seeded uniform noise."""
    rng = np.random.default_rng(seed)
    values = (np.linalg.norm(grid.vertices, axis=1) - _INIT_RADIUS
              + rng.uniform(-_INIT_NOISE, _INIT_NOISE, grid.n_vertices))
    offsets = np.zeros((grid.n_vertices, 3)) if offsets_enabled else None
    return SdfField(values=values, raw_offsets=offsets)


@dataclass
class IterationRecord:
    iteration: int
    total: float
    silhouette: float
    laplacian: float
    sdf_sign: float
    lr: float
    n_mesh_vertices: int

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration, "total": self.total,
            "silhouette": self.silhouette, "laplacian": self.laplacian,
            "sdf_sign": self.sdf_sign, "lr": self.lr,
            "n_mesh_vertices": self.n_mesh_vertices,
        }


@dataclass
class TrainReport:
    records: list[IterationRecord] = dc_field(default_factory=list)
    elapsed_seconds: float = 0.0
    n_views: int = 0
    config: TrainConfig | None = None

    @property
    def loss_history(self) -> np.ndarray:
        """(iters, 4) array of total, silhouette, laplacian, sdf_sign."""
        return np.array([[r.total, r.silhouette, r.laplacian, r.sdf_sign]
                         for r in self.records])

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "iterations": len(self.records),
            "n_views": self.n_views,
            "elapsed_seconds": self.elapsed_seconds,
            "final": None if last is None else last.to_dict(),
        }


class _ViewCycler:
    """Round-robin through a seeded permutation, reshuffled every epoch."""

    def __init__(self, n: int, seed: int):
        self._rng = np.random.default_rng([seed, 1])
        self._n = n
        self._order: list[int] = []
        self._pos = 0

    def take(self, count: int) -> list[int]:
        out = []
        for _ in range(count):
            if self._pos >= len(self._order):
                self._order = self._rng.permutation(self._n).tolist()
                self._pos = 0
            out.append(self._order[self._pos])
            self._pos += 1
        return out


def train(views: list[View], config: TrainConfig = TrainConfig(),
          callback=None):
    """Run the reconstruction; returns (mesh, field, report).

    ``callback(iteration, mesh, field, record)``, when given, runs after every
    update (snapshots, logging). Raises NumericalError with the last finite
    field attached if the loss ever leaves the reals.
    """
    config.validate()
    views = check_views(views, minimum=2)
    views = [view_at_res(v, config.train_res) for v in views]

    grid = make_tet_grid(config.grid_res)
    field = init_sdf(grid, config.seed, config.offsets_enabled)
    settings = RasterSettings(gamma=config.gamma)
    state_values = AdamState.like(field.values)
    state_offsets = (AdamState.like(field.raw_offsets)
                     if config.offsets_enabled else None)
    cycler = _ViewCycler(len(views), config.seed)
    report = TrainReport(n_views=len(views), config=config)
    warned_empty = False

    started = time.perf_counter()
    for it in range(config.iters):
        lr = lr_schedule(config.lr, it, config.iters)
        mesh, prov = marching_tets(grid, field)

        if mesh.n_faces == 0:
            if not warned_empty:
                warnings.warn(
                    "surface vanished (uniform field sign); only the "
                    "sign-consistency term can still act", RuntimeWarning)
                warned_empty = True
            sil = 0.0
            lap = 0.0
            value_grads = np.zeros(grid.n_vertices)
            offset_grads = (np.zeros((grid.n_vertices, 3))
                            if config.offsets_enabled else None)
        else:
            batch = cycler.take(config.batch_views)
            sil = 0.0
            vertex_grads = np.zeros((mesh.n_vertices, 3))
            for vi in batch:
                coverage, inter = soft_coverage(
                    mesh, views[vi], config.train_res, settings)
                loss_v, d_cov = silhouette_loss(coverage, views[vi].mask)
                sil += loss_v
                vertex_grads += backward_silhouette(inter, d_cov)
            sil /= len(batch)
            vertex_grads /= len(batch)

            lap, lap_grads = laplacian_loss(mesh)
            vertex_grads += config.lambda_lap * lap_grads
            value_grads = accumulate_sdf_grads(vertex_grads, prov, grid, field)
            offset_grads = (
                accumulate_offset_grads(vertex_grads, prov, grid, field)
                if config.offsets_enabled else None)

        sdf_l, sdf_grads = sdf_sign_loss(grid, field.values)
        value_grads = value_grads + config.lambda_sdf * sdf_grads
        total = sil + config.lambda_lap * lap + config.lambda_sdf * sdf_l

        if not np.isfinite(total):
            raise NumericalError(
                f"loss became non-finite at iteration {it}", field=field)

        try:
            field.values = adam_step(field.values, value_grads, state_values,
                                     lr, config.beta1, config.beta2, config.eps)
            if config.offsets_enabled:
                field.raw_offsets = adam_step(
                    field.raw_offsets, offset_grads, state_offsets,
                    lr, config.beta1, config.beta2, config.eps)
        except NumericalError as exc:
            exc.field = field
            raise

        record = IterationRecord(
            iteration=it, total=float(total), silhouette=float(sil),
            laplacian=float(lap), sdf_sign=float(sdf_l), lr=lr,
            n_mesh_vertices=mesh.n_vertices)
        report.records.append(record)
        if callback is not None:
            callback(it, mesh, field, record)

    report.elapsed_seconds = time.perf_counter() - started
    final_mesh, _ = marching_tets(grid, field)
    return final_mesh, field, report
