"""Vectorized path engines shared by the filter, control and regularization code.

Paths advance on a common uniform grid.  A path whose next arrival falls
inside a step is rewound and re-advanced piecewise: the step's Brownian
increments are split at the arrival by Brownian-bridge sampling and the
arrival's jump is applied exactly at its time.  Paths without an arrival in the
step are untouched by this, so every path sees its own arrivals exactly while
the bulk of the work stays vectorized.

Work is cut into fixed-size chunks; chunk ``c`` draws from the named streams
with counter ``c``.  Results are concatenated in chunk order, so they do not
depend on how many worker processes were used.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .market_model import simulate_arrivals_batch
from .rng import Streams

CHUNK_SIZE = 4096


class Noise:
    """Declares a noise source consumed by a model.

    ``kind='brownian'`` increments scale with sqrt(step) and are split by a
    Brownian bridge; ``kind='normal'`` sources are standard normal per piece and
    get fresh draws (stream ``name + '_split'``) for split pieces.
    """

    def __init__(self, name: str, dim: int, kind: str = "brownian"):
        self.name = name
        self.dim = dim
        self.kind = kind


class PathModel:
    """Interface for models driven by :func:`run_paths`."""

    noises: list[Noise] = []
    state_names: tuple[str, ...] = ()
    mark_dim: int = 1

    def advance(self, idx, t, h, draws):
        raise NotImplementedError

    def jump(self, idx, t, marks):
        raise NotImplementedError

    def after_step(self, n):
        pass

    def snapshot(self, idx):
        # arrays named v_* carry a leading variant axis; the path axis is then axis 1
        return {k: (getattr(self, k)[:, idx] if k.startswith("v_") else getattr(self, k)[idx]).copy()
                for k in self.state_names}

    def restore(self, idx, snap):
        for k, v in snap.items():
            if k.startswith("v_"):
                getattr(self, k)[:, idx] = v
            else:
                getattr(self, k)[idx] = v


def _arrival_table(lam, t0, T, n_paths, rng):
    """Padded (n_paths, K) array of arrival times in (t0, T], padded with +inf."""
    rows = simulate_arrivals_batch(lam, T - t0, n_paths, rng)
    k = max((r.size for r in rows), default=0)
    table = np.full((n_paths, k + 1), np.inf)
    for i, r in enumerate(rows):
        table[i, : r.size] = t0 + r
    return table


def run_paths(model: PathModel, n_paths: int, grid: np.ndarray, lam: float, streams: Streams):
    """Drive ``model`` over ``grid`` for ``n_paths`` paths with Poisson(lam) arrivals."""
    t0, T = float(grid[0]), float(grid[-1])
    table = _arrival_table(lam, t0, T, n_paths, streams["arrivals"])
    ptr = np.zeros(n_paths, dtype=int)
    rows = np.arange(n_paths)
    next_arr = table[:, 0].copy()
    everyone = slice(None)
    model.after_step(0)
    for n in range(grid.size - 1):
        t, t1 = float(grid[n]), float(grid[n + 1])
        h = t1 - t
        draws = {}
        for nz in model.noises:
            z = streams[nz.name].standard_normal((n_paths, nz.dim))
            draws[nz.name] = z * np.sqrt(h) if nz.kind == "brownian" else z
        hit = np.nonzero(next_arr <= t1)[0]
        snap = model.snapshot(hit) if hit.size else None
        model.advance(everyone, t, h, draws)
        if hit.size:
            model.restore(hit, snap)
            _split_step(model, hit, t, t1, draws, table, ptr, streams)
            next_arr[hit] = table[rows[hit], ptr[hit]]
        model.after_step(n + 1)
    return model


def _split_step(model, hit, t, t1, draws, table, ptr, streams):
    active = hit
    cur = np.full(hit.size, t)
    rem = {nz.name: draws[nz.name][hit].copy() for nz in model.noises if nz.kind == "brownian"}
    while active.size:
        a = table[active, ptr[active]]
        arriving = a <= t1
        end = np.where(arriving, a, t1)
        s = end - cur
        r = t1 - cur
        piece = {}
        for nz in model.noises:
            if nz.kind == "brownian":
                w = rem[nz.name]
                frac = np.divide(s, r, out=np.ones_like(s), where=r > 0)
                sd = np.sqrt(np.clip(s * (r - s) / np.where(r > 0, r, 1.0), 0.0, None))
                xi = streams[nz.name + "_bridge"].standard_normal(w.shape)
                inc = frac[:, None] * w + sd[:, None] * xi
                piece[nz.name] = inc
                rem[nz.name] = w - inc
            else:
                piece[nz.name] = streams[nz.name + "_split"].standard_normal((active.size, nz.dim))
        moving = s > 0
        if np.any(moving):
            sel = np.nonzero(moving)[0]
            model.advance(active[sel], cur[sel], s[sel], {k: v[sel] for k, v in piece.items()})
        if np.any(arriving):
            sel = np.nonzero(arriving)[0]
            marks = streams["marks"].standard_normal((sel.size, model.mark_dim))
            model.jump(active[sel], a[sel], marks)
            ptr[active[sel]] += 1
        cur = end
        done = ~arriving
        keep = ~done
        active, cur = active[keep], cur[keep]
        rem = {k: v[keep] for k, v in rem.items()}


def run_chunked(task, n_paths: int, seed: int, workers: int = 1, chunk_size: int = CHUNK_SIZE):
    """Run ``task(n, streams)`` over fixed-size chunks and concatenate the returned dicts."""
    sizes = [chunk_size] * (n_paths // chunk_size)
    if n_paths % chunk_size:
        sizes.append(n_paths % chunk_size)
    jobs = [(task, n, seed, c) for c, n in enumerate(sizes)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_job, jobs))
    else:
        parts = [_run_job(j) for j in jobs]
    out = {}
    for key in parts[0]:
        vals = [p[key] for p in parts]
        if isinstance(vals[0], np.ndarray):
            out[key] = np.concatenate(vals, axis=1 if key.startswith("v_") else 0)
        else:
            out[key] = vals
    return out


def _run_job(job):
    task, n, seed, c = job
    return task(n, Streams(seed, c))
