"""4x4 grid world with a controllable square and a noisy exogenous row.

Rows 0-2 hold the agent, which follows a fixed snaking cycle through all 12
cells. Row 3 is redrawn as Bernoulli(0.5) * sigma at every frame.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np

from .. import container
from ..numerics import RngStream

GRID = 4
EXO_ROW = 3
ACTIONS = ("left", "right", "up", "down")
LEFT, RIGHT, UP, DOWN = range(4)
_MOVES = {LEFT: (0, -1), RIGHT: (0, 1), UP: (-1, 0), DOWN: (1, 0)}

# Hamiltonian cycle over the 12 controllable cells
POLICY = {
    (0, 0): RIGHT, (0, 1): RIGHT, (0, 2): RIGHT, (0, 3): DOWN,
    (1, 3): DOWN, (2, 3): LEFT, (2, 2): UP, (1, 2): LEFT,
    (1, 1): DOWN, (2, 1): LEFT, (2, 0): UP, (1, 0): UP,
}

STREAM_FRAMES = 31
STREAM_PAIRS = 32
STREAM_EVAL = 33


@dataclass(frozen=True)
class GridEnvConfig:
    sigma: float = 0.0
    n_steps: int = 12000
    seed: int = 0

    def validate(self) -> "GridEnvConfig":
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def snaking_policy(cell: tuple[int, int]) -> int:
    cell = (int(cell[0]), int(cell[1]))
    if cell[0] >= EXO_ROW:
        raise ValueError(f"cell {cell} lies in the exogenous row")
    if cell not in POLICY:
        raise ValueError(f"cell {cell} is outside the grid")
    return POLICY[cell]


def step_cell(cell: tuple[int, int], action: int) -> tuple[int, int]:
    dr, dc = _MOVES[action]
    return cell[0] + dr, cell[1] + dc


@dataclass
class GridData:
    """Transitions stored as arrays; frames are (n, 4, 4) float32."""

    obs: np.ndarray
    obs_next: np.ndarray
    obs_tilde: np.ndarray
    obs_tilde_next: np.ndarray
    action: np.ndarray
    cell: np.ndarray
    cell_next: np.ndarray
    cfg: GridEnvConfig | None = None

    def __len__(self):
        return self.obs.shape[0]

    def take(self, idx) -> "GridData":
        return GridData(self.obs[idx], self.obs_next[idx], self.obs_tilde[idx],
                        self.obs_tilde_next[idx], self.action[idx], self.cell[idx],
                        self.cell_next[idx], self.cfg)


def _frames(cells: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    n = cells.shape[0]
    f = np.zeros((n, GRID, GRID), dtype=np.float32)
    f[np.arange(n), cells[:, 0], cells[:, 1]] = 1.0
    bits = rng.uniform((n, GRID)) < 0.5
    f[:, EXO_ROW, :] = bits.astype(np.float32) * np.float32(sigma)
    return f


def generate_grid(cfg: GridEnvConfig, rng: RngStream | None = None,
                  pair_rng: RngStream | None = None) -> GridData:
    """Follow the cycle from (0, 0) for ``n_steps`` transitions (no resets)."""
    cfg.validate()
    rng = rng or RngStream(cfg.seed, STREAM_FRAMES)
    pair_rng = pair_rng or rng.spawn(STREAM_PAIRS)
    n = cfg.n_steps
    cells = np.empty((n + 1, 2), dtype=np.int64)
    actions = np.empty(n, dtype=np.int64)
    c = (0, 0)
    for t in range(n):
        cells[t] = c
        actions[t] = POLICY[c]
        c = step_cell(c, actions[t])
    cells[n] = c
    frames = _frames(cells, cfg.sigma, rng)
    obs_t = _frames(cells[:-1], cfg.sigma, pair_rng)
    obs_tn = _frames(cells[1:], cfg.sigma, pair_rng)
    return GridData(frames[:-1], frames[1:], obs_t, obs_tn, actions,
                    cells[:-1].copy(), cells[1:].copy(), cfg)


def eval_data(cfg: GridEnvConfig, n_steps: int = 1200) -> GridData:
    """Held-out transitions from independent streams."""
    rng = RngStream(cfg.seed, STREAM_EVAL)
    return generate_grid(GridEnvConfig(cfg.sigma, n_steps, cfg.seed), rng, rng.spawn(STREAM_EVAL + 100))


def save(data: GridData, path) -> None:
    arrays = {k: getattr(data, k) for k in
              ("obs", "obs_next", "obs_tilde", "obs_tilde_next", "action", "cell", "cell_next")}
    container.write(path, {"kind": "grid_dataset", "env": data.cfg.to_dict() if data.cfg else {}}, arrays)


def load(path) -> GridData:
    meta, arr = container.read(path)
    if meta.get("kind") != "grid_dataset":
        raise container.ContainerError(f"{path} is not a grid dataset")
    cfg = GridEnvConfig.from_dict(meta["env"]) if meta.get("env") else None
    return GridData(arr["obs"], arr["obs_next"], arr["obs_tilde"], arr["obs_tilde_next"],
                    arr["action"], arr["cell"], arr["cell_next"], cfg)


def export_csv(data: GridData, path, limit: int = 100) -> None:
    """One line per transition: action name then both frames as 16 values each."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "action"] + [f"obs_{r}{c}" for r in range(GRID) for c in range(GRID)]
                   + [f"next_{r}{c}" for r in range(GRID) for c in range(GRID)])
        for t in range(min(limit, len(data))):
            w.writerow([t, ACTIONS[data.action[t]],
                        *(f"{v:g}" for v in data.obs[t].ravel()),
                        *(f"{v:g}" for v in data.obs_next[t].ravel())])
