"""State-space models, random sparse ground-truth systems, and simulation.

The model class represents the discrete-time innovations-form system

    x(t_{k+1}) = A x(t_k) + B u(t_k) + process noise
    y(t_k)     = C x(t_k) + D u(t_k) + measurement noise

with a single scale parameter ``sigma``: the process noise is drawn as
``sigma * N(0, I_n)`` and the measurement noise as ``sigma * N(0, I_p)``
during simulation.  The estimation modules assume process covariance
``sigma^2 I`` and unit measurement covariance, so ``sigma`` is the one
noise knob shared by generation and identification.

A dataset holds outputs y(t_1..t_N) and the inputs u(t_0..t_{N-1}) that
drive each transition; there is no measurement at t_0.
"""

from dataclasses import dataclass

import numpy as np

from .fileio import LineReader, fmt, fmt_row

__all__ = [
    "StateSpaceModel",
    "Dataset",
    "GroundTruth",
    "GenerationError",
    "SimulationDivergedError",
    "generate_random_network",
    "simulate",
    "scale_noise_for_snr",
    "save_dataset_csv",
    "load_dataset_csv",
    "save_model",
    "load_model",
]


class GenerationError(RuntimeError):
    """Random system generation kept producing unusable models."""


class SimulationDivergedError(RuntimeError):
    """The simulated state left the representable range (unstable model)."""

    def __init__(self, step):
        self.step = step
        super().__init__(f"simulation diverged at step {step}")


def _as_matrix(x, shape, name):
    arr = np.array(x, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass
class StateSpaceModel:
    """Innovations-form LTI model (A, B, C, D, sigma, m0, R0).

    C must have full row rank, R0 must be symmetric positive semidefinite,
    and sigma must be nonnegative (zero means a noise-free system; the
    Kalman filter additionally requires sigma > 0).
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    sigma: float
    m0: np.ndarray
    R0: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        n = A.shape[0]
        C = np.array(self.C, dtype=float)
        if C.ndim != 2 or C.shape[1] != n:
            raise ValueError(f"C must have {n} columns, got shape {C.shape}")
        p = C.shape[0]
        if p > n:
            raise ValueError(f"need n >= p, got n={n}, p={p}")
        B = np.array(self.B, dtype=float)
        if B.ndim != 2 or B.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got shape {B.shape}")
        m = B.shape[1]
        self.A = _as_matrix(A, (n, n), "A")
        self.B = _as_matrix(B, (n, m), "B")
        self.C = _as_matrix(C, (p, n), "C")
        self.D = _as_matrix(self.D, (p, m), "D")
        self.m0 = np.array(self.m0, dtype=float).reshape(n)
        self.R0 = _as_matrix(self.R0, (n, n), "R0")
        self.sigma = float(self.sigma)
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if np.linalg.matrix_rank(self.C) != p:
            raise ValueError("C must have full row rank")
        if not np.allclose(self.R0, self.R0.T, atol=1e-10):
            raise ValueError("R0 must be symmetric")
        eigs = np.linalg.eigvalsh(0.5 * (self.R0 + self.R0.T))
        if eigs.min() < -1e-10 * max(1.0, eigs.max()):
            raise ValueError("R0 must be positive semidefinite")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.C.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))


@dataclass
class Dataset:
    """Simulated or measured input/output record.

    Y[k] is y(t_{k+1}) and U[k] is u(t_k) for k = 0..N-1, so U[k] drives
    the transition into the sample stored in Y[k].
    """

    Y: np.ndarray
    U: np.ndarray
    N: int
    seed: int | None = None
    snr_db: float | None = None

    def __post_init__(self):
        self.Y = np.atleast_2d(np.array(self.Y, dtype=float))
        self.U = np.atleast_2d(np.array(self.U, dtype=float))
        if len(self.Y) != self.N or len(self.U) != self.N:
            raise ValueError("Y and U must both have N rows")
        if not (np.all(np.isfinite(self.Y)) and np.all(np.isfinite(self.U))):
            raise ValueError("dataset contains non-finite values")

    @property
    def p(self):
        return self.Y.shape[1]

    @property
    def m(self):
        return self.U.shape[1]


@dataclass
class GroundTruth:
    """A generated model together with the Boolean structure of its network."""

    model: StateSpaceModel
    q_structure: np.ndarray
    p_structure: np.ndarray

    def __post_init__(self):
        self.q_structure = np.array(self.q_structure, dtype=bool)
        self.p_structure = np.array(self.p_structure, dtype=bool)
        if np.any(np.diag(self.q_structure)):
            raise ValueError("q_structure must have an all-false diagonal")


def generate_random_network(p, n, m, density, seed, max_retries=20):
    """Draw a random stable sparse system with C = [I 0] and diagonal-led B.

    The sparsity pattern of A is directed Erdos-Renyi with the given
    density, entries are uniform on +-[0.5, 1.0], and A is rescaled to a
    spectral radius drawn uniformly from [0.5, 0.95].  B is [diag(b); 0]
    with b_i uniform in [0.5, 1.5], which keeps the input-to-output map
    diagonal by construction.  The Boolean network structure is extracted
    from the system's dynamical structure function.

    Candidates whose structure extraction fails numerically, or whose A
    pattern is degenerate, are rejected and redrawn up to ``max_retries``
    times before a GenerationError is raised.
    """
    from . import dsf as _dsf

    if n < p:
        raise ValueError("need n >= p")
    if m != p:
        raise ValueError("need m = p so the input-to-output map can be square")
    if not 0.0 < density <= 1.0:
        raise ValueError("density must be in (0, 1]")
    if density * n * n < n:
        raise ValueError("density too low: expected at least n nonzeros in A")

    rng = np.random.default_rng(seed)
    expected_nnz = density * n * n
    for _ in range(max_retries):
        pattern = rng.random((n, n)) < density
        signs = np.where(rng.random((n, n)) < 0.5, -1.0, 1.0)
        A = np.where(pattern, signs * rng.uniform(0.5, 1.0, (n, n)), 0.0)
        rho_target = rng.uniform(0.5, 0.95)
        b = rng.uniform(0.5, 1.5, p)
        q_seed = int(rng.integers(2**32))

        nnz = int(np.count_nonzero(A))
        if nnz == 0 or nnz > 2 * expected_nnz + 4:
            continue
        rho = float(np.max(np.abs(np.linalg.eigvals(A))))
        if rho < 1e-12:
            continue
        A *= rho_target / rho

        B = np.vstack([np.diag(b), np.zeros((n - p, m))])
        C = np.hstack([np.eye(p), np.zeros((p, n - p))])
        model = StateSpaceModel(
            A=A, B=B, C=C, D=np.zeros((p, m)), sigma=1.0,
            m0=np.zeros(n), R0=np.eye(n),
        )
        try:
            sample = _dsf.dsf_from_state_space(model, _dsf.default_q_points(seed=q_seed))
            graph = _dsf.boolean_structure(sample, rel_tol=1e-4)
        except _dsf.DSFError:
            continue
        return GroundTruth(model=model, q_structure=graph.q_adj, p_structure=graph.p_adj)
    raise GenerationError(f"no usable random system after {max_retries} attempts")


def _psd_sqrt(M):
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _rollout(model, U_full, sigma, x0, rng):
    """Iterate the state recursion over N steps; rng=None means noise-free."""
    N = len(U_full) - 1
    n, p = model.n, model.p
    Y = np.empty((N, p))
    x = np.array(x0, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, N + 1):
            if rng is not None:
                w = rng.standard_normal(n)
                e = rng.standard_normal(p)
            else:
                w = np.zeros(n)
                e = np.zeros(p)
            x = model.A @ x + model.B @ U_full[k - 1] + sigma * w
            if not np.all(np.isfinite(x)):
                raise SimulationDivergedError(k)
            Y[k - 1] = model.C @ x + model.D @ U_full[k] + sigma * e
    return Y


def simulate(model, N, input_kind="gaussian_iid", U_provided=None, snr_db=None, seed=None):
    """Simulate N output samples y(t_1..t_N) driven by u(t_0..t_{N-1}).

    With ``input_kind="gaussian_iid"`` the inputs are i.i.d. standard
    normal; ``"provided"`` uses ``U_provided`` (N rows).  The feedthrough
    input at the final sample, u(t_N), is not part of the recorded input
    sequence; it is drawn in gaussian mode and taken as zero for provided
    inputs (only relevant when D is nonzero).

    If ``snr_db`` is given, sigma is first rescaled by
    :func:`scale_noise_for_snr` so the channel-averaged output
    signal-to-noise variance ratio hits the target.
    """
    if N < 1:
        raise ValueError("need N >= 1")
    rng = np.random.default_rng(seed)
    n, m = model.n, model.m

    if input_kind == "gaussian_iid":
        U_full = rng.standard_normal((N + 1, m))
    elif input_kind == "provided":
        if U_provided is None:
            raise ValueError("input_kind='provided' requires U_provided")
        U = np.atleast_2d(np.array(U_provided, dtype=float))
        if U.shape != (N, m):
            raise ValueError(f"U_provided must have shape ({N}, {m}), got {U.shape}")
        U_full = np.vstack([U, np.zeros((1, m))])
    else:
        raise ValueError(f"unknown input_kind {input_kind!r}")

    sigma = model.sigma
    if snr_db is not None:
        sigma = scale_noise_for_snr(model, U_full[:N], snr_db,
                                    seed=int(rng.integers(2**32)))

    x0 = model.m0 + _psd_sqrt(model.R0) @ rng.standard_normal(n)
    Y = _rollout(model, U_full, sigma, x0, rng)
    return Dataset(Y=Y, U=U_full[:N].copy(), N=N, seed=seed, snr_db=snr_db)


def scale_noise_for_snr(model, U, snr_db, seed=None):
    """Return sigma hitting a target output SNR for the given input sequence.

    SNR is the channel-averaged ratio of the noise-free output variance to
    the variance of the noise contribution.  Both are estimated from one
    noise-free rollout and one unit-noise rollout from x0 = m0; since the
    system is linear, the noise contribution scales exactly with sigma.
    """
    U = np.atleast_2d(np.array(U, dtype=float))
    if len(U) < 2:
        raise ValueError("need at least two input samples to estimate variances")
    if model.spectral_radius() >= 1.0:
        raise ValueError("model must be stable to define a steady SNR")
    U_full = np.vstack([U, np.zeros((1, model.m))])
    y_free = _rollout(model, U_full, 0.0, model.m0, None)
    y_unit = _rollout(model, U_full, 1.0, model.m0, np.random.default_rng(seed))
    noise = y_unit - y_free
    v_signal = float(np.mean(np.var(y_free, axis=0)))
    v_noise = float(np.mean(np.var(noise, axis=0)))
    if v_signal <= 1e-300:
        raise ValueError("zero signal power: noise-free output has no variance")
    return float(np.sqrt(v_signal / v_noise) * 10.0 ** (-snr_db / 20.0))


# ---------------------------------------------------------------------------
# file formats

def save_dataset_csv(dataset, path):
    """Write the dataset CSV: header t,y1..yp,u1..um; row k holds the 1-based
    index, y(t_k), and the input u(t_{k-1}) driving that step."""
    p, m = dataset.p, dataset.m
    lines = ["# netrecon dataset v1"]
    if dataset.seed is not None:
        lines.append(f"# seed {int(dataset.seed)}")
    if dataset.snr_db is not None:
        lines.append(f"# snr_db {fmt(dataset.snr_db)}")
    header = ["t"] + [f"y{i + 1}" for i in range(p)] + [f"u{j + 1}" for j in range(m)]
    lines.append(",".join(header))
    for k in range(dataset.N):
        row = [str(k + 1)] + [fmt(v) for v in dataset.Y[k]] + [fmt(v) for v in dataset.U[k]]
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset_csv(path):
    reader = LineReader(path)
    header = reader.next_line().split(",")
    if header[0] != "t":
        reader.error(f"first column must be 't', found {header[0]!r}")
    p = sum(1 for name in header if name.startswith("y"))
    m = sum(1 for name in header if name.startswith("u"))
    expected = ["t"] + [f"y{i + 1}" for i in range(p)] + [f"u{j + 1}" for j in range(m)]
    if header != expected:
        reader.error(f"malformed header: expected {','.join(expected)}")
    Y_rows, U_rows = [], []
    k = 0
    while not reader.at_end():
        parts = reader.next_line().split(",")
        k += 1
        if len(parts) != 1 + p + m:
            reader.error(f"row {k}: expected {1 + p + m} fields, found {len(parts)}")
        try:
            t = int(parts[0])
            vals = [float(v) for v in parts[1:]]
        except ValueError:
            reader.error(f"row {k}: non-numeric field")
        if t != k:
            reader.error(f"row {k}: field 't' must be {k}, found {t}")
        Y_rows.append(vals[:p])
        U_rows.append(vals[p:])
    if k == 0:
        reader.error("dataset has no rows")
    seed = None
    snr_db = None
    for comment in reader.comments:
        parts = comment.split(None, 1)
        if len(parts) == 2 and parts[0] == "seed":
            seed = int(parts[1])
        elif len(parts) == 2 and parts[0] == "snr_db":
            snr_db = float(parts[1])
    return Dataset(Y=np.array(Y_rows), U=np.array(U_rows), N=k, seed=seed, snr_db=snr_db)


def save_model(model, path, seed=None, density=None):
    """Write the structured-text model file (matrices row-major, one row per line)."""
    n, p, m = model.n, model.p, model.m
    lines = ["# netrecon model v1", f"n {n}", f"p {p}", f"m {m}",
             f"sigma {fmt(model.sigma)}"]
    if seed is not None:
        lines.append(f"seed {int(seed)}")
    if density is not None:
        lines.append(f"density {fmt(density)}")
    for name, M in [("A", model.A), ("B", model.B), ("C", model.C), ("D", model.D)]:
        lines.append(name)
        lines.extend(fmt_row(row) for row in M)
    lines.append("m0")
    lines.append(fmt_row(model.m0))
    lines.append("R0")
    lines.extend(fmt_row(row) for row in model.R0)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path):
    """Read a model file; returns (model, metadata) with any seed/density found."""
    reader = LineReader(path)
    n = reader.expect_int("n")
    p = reader.expect_int("p")
    m = reader.expect_int("m")
    sigma = reader.expect_float("sigma")
    meta = {}
    # optional metadata lines before the first matrix block
    while True:
        line = reader.next_line()
        if line == "A":
            break
        parts = line.split(None, 1)
        if parts[0] == "seed" and len(parts) == 2:
            meta["seed"] = int(parts[1])
        elif parts[0] == "density" and len(parts) == 2:
            meta["density"] = float(parts[1])
        else:
            reader.error(f"unexpected field '{parts[0]}' before matrix A")
    A = np.vstack([reader.read_floats(n, f"matrix A row {r + 1}") for r in range(n)])
    B = reader.read_matrix("B", n, m)
    C = reader.read_matrix("C", p, n)
    D = reader.read_matrix("D", p, m)
    reader.expect_literal("m0")
    m0 = reader.read_floats(n, "m0")
    R0 = reader.read_matrix("R0", n, n)
    model = StateSpaceModel(A=A, B=B, C=C, D=D, sigma=sigma, m0=m0, R0=R0)
    return model, meta
