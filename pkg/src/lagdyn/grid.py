"""Lagrangian density on a 1-D periodic lattice.

A local density consumes the field values and velocities on one stencil and
returns a scalar; summing it over every site gives the total Lagrangian,
and the same acceleration solve as for ordinary coordinates yields the
field acceleration.  Because each site only couples to its stencil, the
velocity-velocity Hessian is banded (bandwidth twice the stencil
half-width, plus periodic wrap corners), which the banded path exploits:
banded factorization plus a small Woodbury correction for the corners,
linear cost in the number of sites.

The explicit finite-difference wave density is

    density_i = phi_dot_i^2 - ((phi_{i+1} - phi_{i-1}) / (2 dx))^2

implemented verbatim, without conventional 1/2 factors; its hand-derived
equation of motion

    phi_ddot_i = (phi_{i+2} - 2 phi_i + phi_{i-2}) / (4 dx^2)

serves as the oracle for both solve paths.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded

from .autodiff import ops
from .autodiff.engine import make_vjp, raw_value
from .dynamics import PINV_RTOL, hessian_diagnostics
from .errors import DataFormatError, UsageError
from .network import network_bundle

__all__ = [
    "GridField",
    "StencilSet",
    "DegenerateHessianWarning",
    "fd_wave_density",
    "wave_density_local",
    "total_lagrangian",
    "field_accel_dense",
    "field_accel_banded",
    "grid_energy",
    "SharedDensityModel",
    "write_field",
    "read_field",
]


class DegenerateHessianWarning(UserWarning):
    """Raised as a warning when a grid solve hits a degenerate Hessian."""


@dataclass
class GridField:
    """Field values and velocities on a periodic 1-D lattice."""

    phi: np.ndarray
    phi_dot: np.ndarray
    dx: float
    boundary: str = "periodic"

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.phi_dot = np.asarray(self.phi_dot, dtype=np.float64)
        if self.phi.ndim != 1 or self.phi.shape != self.phi_dot.shape:
            raise UsageError("phi and phi_dot must be equal-length vectors")
        if self.phi.size < 5:
            raise UsageError(
                "grids need at least 5 sites (the wave stencil's equation of "
                "motion reaches two sites out)"
            )
        if not (np.all(np.isfinite(self.phi)) and np.all(np.isfinite(self.phi_dot))):
            raise UsageError("field entries must be finite")
        if not self.dx > 0:
            raise UsageError("grid spacing dx must be positive")
        if self.boundary != "periodic":
            raise UsageError("only periodic boundaries are supported")

    @property
    def n(self):
        return self.phi.size


@dataclass
class StencilSet:
    """Per-site neighbor index lists, already resolved modulo the boundary."""

    indices: list

    def __post_init__(self):
        self.indices = [np.asarray(ix, dtype=np.intp) for ix in self.indices]

    @classmethod
    def nearest_neighbor(cls, n, width=1):
        """The default stencil: site i couples to i-width..i+width, wrapped."""
        offsets = np.arange(-width, width + 1)
        return cls([np.mod(i + offsets, n) for i in range(n)])

    @property
    def n(self):
        return len(self.indices)

    def validate_for(self, field):
        if self.n != field.n:
            raise UsageError(
                f"stencil set covers {self.n} sites but field has {field.n}"
            )
        for i, ix in enumerate(self.indices):
            if np.any(ix < 0) or np.any(ix >= field.n):
                raise UsageError(f"stencil for site {i} indexes outside the grid")

    def uniform_offsets(self):
        """Common offset pattern if every site uses the same one, else None."""
        n = self.n
        base = None
        for i, ix in enumerate(self.indices):
            off = np.mod(ix - i + n // 2, n) - n // 2
            if base is None:
                base = off
            elif not np.array_equal(off, base):
                return None
        return base

    @property
    def half_width(self):
        off = self.uniform_offsets()
        if off is None:
            raise UsageError("stencil set is not uniform; no single half-width")
        return int(np.max(np.abs(off)))


def fd_wave_density(field, i):
    """Per-site finite-difference wave density at site ``i``."""
    n = field.n
    if not 0 <= i < n:
        raise UsageError(f"site index {i} outside grid of {n} sites")
    spatial = (field.phi[(i + 1) % n] - field.phi[(i - 1) % n]) / (2.0 * field.dx)
    return float(field.phi_dot[i] ** 2 - spatial**2)


def wave_density_local(dx):
    """The wave density as a stencil-local callable (engine-expressible).

    The returned callable consumes (phi_patch, phi_dot_patch) with the
    center site in the middle column and works on batches of patches.
    """
    inv = 1.0 / (2.0 * dx)

    def local(phi_patch, phid_patch):
        k = np.shape(raw_value(phi_patch))[-1]
        c = (k - 1) // 2
        spatial = ops.mul(
            inv, ops.sub(phi_patch[..., c + 1], phi_patch[..., c - 1])
        )
        center = phid_patch[..., c]
        return ops.sub(ops.mul(center, center), ops.mul(spatial, spatial))

    return local


def _gather_patches(field, stencils):
    stencils.validate_for(field)
    phi_patches = [field.phi[ix] for ix in stencils.indices]
    phid_patches = [field.phi_dot[ix] for ix in stencils.indices]
    return phi_patches, phid_patches


def total_lagrangian(local, field, stencils):
    """Sum of the per-site density over all sites."""
    phi_patches, phid_patches = _gather_patches(field, stencils)
    total = 0.0
    sizes = {p.size for p in phi_patches}
    if len(sizes) == 1:
        values = raw_value(local(np.stack(phi_patches), np.stack(phid_patches)))
        total = float(np.sum(values))
    else:
        for pp, pd in zip(phi_patches, phid_patches):
            total += float(raw_value(local(pp[None, :], pd[None, :])))
    return total


def _local_bundles(local, phi_patches, phid_patches):
    """Per-site (value, gradient, Hessian) of the local density.

    Gradient/Hessian are over the concatenated (phi_patch, phid_patch)
    variables; sites with equal stencil sizes are batched through the
    engine together.
    """
    n = len(phi_patches)
    out = [None] * n
    by_size = {}
    for i, p in enumerate(phi_patches):
        by_size.setdefault(p.size, []).append(i)
    for k, sites in by_size.items():
        P = np.stack([phi_patches[i] for i in sites])
        D = np.stack([phid_patches[i] for i in sites])
        b = len(sites)

        def stacked_gradient(pp, pd):
            _, vjp = make_vjp(local, (pp, pd))
            gp, gd = vjp(np.ones(b))
            return ops.concatenate([gp, gd], axis=-1)

        grad, vjp_grad = make_vjp(stacked_gradient, (P, D))
        values = np.asarray(raw_value(local(P, D)))
        grad = np.asarray(raw_value(grad))
        hess = np.empty((b, 2 * k, 2 * k))
        for j in range(2 * k):
            seed = np.zeros((b, 2 * k))
            seed[:, j] = 1.0
            hp, hd = vjp_grad(seed)
            hess[:, j, :] = np.concatenate([raw_value(hp), raw_value(hd)], axis=-1)
        for row, site in enumerate(sites):
            out[site] = (float(values[row]), grad[row], hess[row])
    return out


def _assemble_dense(local, field, stencils):
    phi_patches, phid_patches = _gather_patches(field, stencils)
    bundles = _local_bundles(local, phi_patches, phid_patches)
    n = field.n
    grad_phi = np.zeros(n)
    h_vv = np.zeros((n, n))
    rhs_coupling = np.zeros(n)
    for i, ix in enumerate(stencils.indices):
        k = ix.size
        _, grad, hess = bundles[i]
        gp = grad[:k]
        h_dd = hess[k:, k:]
        h_dq = hess[k:, :k]  # rows: velocity entries, columns: coordinates
        np.add.at(grad_phi, ix, gp)
        h_vv[np.ix_(ix, ix)] += h_dd
        np.add.at(rhs_coupling, ix, h_dq @ field.phi_dot[ix])
    rhs = grad_phi - rhs_coupling
    return h_vv, rhs


def field_accel_dense(local, field, stencils):
    """Field acceleration through the dense total-Lagrangian solve."""
    h_vv, rhs = _assemble_dense(local, field, stencils)
    cond, degenerate = hessian_diagnostics(h_vv)
    if degenerate:
        warnings.warn(
            "degenerate velocity Hessian in dense grid solve; "
            "using truncated pseudoinverse",
            DegenerateHessianWarning,
            stacklevel=2,
        )
    return ops.trunc_pinv(h_vv, PINV_RTOL) @ rhs


def _banded_index(a, b, n, bw):
    """Signed circular offset if |offset| <= bw, else None (corner entry)."""
    off = (b - a) % n
    if off > n // 2:
        off -= n
    return off if abs(off) <= bw else None


def field_accel_banded(local, field, stencils):
    """Same result as the dense path, assembled and solved in banded form.

    The periodic wrap couples the first and last ``2*width`` sites across
    the matrix corners; a Woodbury correction on top of the banded
    factorization handles those, keeping the cost linear in the number of
    sites.  Degenerate systems fall back to the dense path with a warning.
    """
    width = stencils.half_width
    bw = 2 * width
    n = field.n
    if n <= 2 * bw:
        # Band plus corners would cover the whole matrix; nothing to gain.
        return field_accel_dense(local, field, stencils)

    phi_patches, phid_patches = _gather_patches(field, stencils)
    bundles = _local_bundles(local, phi_patches, phid_patches)
    ab = np.zeros((2 * bw + 1, n))
    corner_rows = list(range(bw)) + list(range(n - bw, n))
    corner_pos = {a: idx for idx, a in enumerate(corner_rows)}
    s = len(corner_rows)
    corner = np.zeros((s, s))
    grad_phi = np.zeros(n)
    rhs_coupling = np.zeros(n)
    for i, ix in enumerate(stencils.indices):
        k = ix.size
        _, grad, hess = bundles[i]
        np.add.at(grad_phi, ix, grad[:k])
        h_dd = hess[k:, k:]
        h_dq = hess[k:, :k]
        np.add.at(rhs_coupling, ix, h_dq @ field.phi_dot[ix])
        for c in range(k):
            a = int(ix[c])
            for e in range(k):
                b = int(ix[e])
                off = a - b
                if abs(off) <= bw:
                    ab[bw + off, b] += h_dd[c, e]
                else:
                    corner[corner_pos[a], corner_pos[b]] += h_dd[c, e]
    rhs = grad_phi - rhs_coupling

    try:
        columns = np.zeros((n, 1 + s))
        columns[:, 0] = rhs
        for idx, a in enumerate(corner_rows):
            columns[a, 1 + idx] = 1.0
        solved = solve_banded((bw, bw), ab, columns)
    except np.linalg.LinAlgError:
        warnings.warn(
            "banded factorization failed; falling back to the dense solve",
            DegenerateHessianWarning,
            stacklevel=2,
        )
        return field_accel_dense(local, field, stencils)

    x0 = solved[:, 0]
    y = solved[:, 1:]
    y_s = y[corner_rows, :]
    x0_s = x0[corner_rows]
    small = np.eye(s) + y_s @ corner
    try:
        correction = np.linalg.solve(small, x0_s)
    except np.linalg.LinAlgError:
        warnings.warn(
            "singular Woodbury correction; falling back to the dense solve",
            DegenerateHessianWarning,
            stacklevel=2,
        )
        return field_accel_dense(local, field, stencils)
    acc = x0 - y @ (corner @ correction)

    # Residual check guards the near-singular region the factorization
    # cannot see; training-time degeneracy must match the dense answer.
    residual = _apply_banded(ab, corner, corner_rows, bw, acc) - rhs
    if not np.all(np.isfinite(acc)) or np.linalg.norm(residual) > 1e-8 * (
        1.0 + np.linalg.norm(rhs)
    ):
        warnings.warn(
            "ill-conditioned banded solve; falling back to the dense solve",
            DegenerateHessianWarning,
            stacklevel=2,
        )
        return field_accel_dense(local, field, stencils)
    return acc


def _apply_banded(ab, corner, corner_rows, bw, x):
    n = x.size
    out = np.zeros(n)
    for off in range(-bw, bw + 1):
        row = ab[bw + off]
        # ab[bw + off, b] holds H[b + off, b]
        a = np.arange(n) + off
        mask = (a >= 0) & (a < n)
        out[a[mask]] += row[mask] * x[mask]
    for i, a in enumerate(corner_rows):
        for j, b in enumerate(corner_rows):
            out[a] += corner[i, j] * x[b]
    return out


def grid_energy(local, field, stencils):
    """Legendre-transform energy of the lattice Lagrangian."""
    phi_patches, phid_patches = _gather_patches(field, stencils)
    bundles = _local_bundles(local, phi_patches, phid_patches)
    momentum = np.zeros(field.n)
    total = 0.0
    for i, ix in enumerate(stencils.indices):
        k = ix.size
        value, grad, _ = bundles[i]
        total += value
        np.add.at(momentum, ix, grad[k:])
    return float(momentum @ field.phi_dot - total)


class SharedDensityModel:
    """A learnable per-site density shared across all lattice sites.

    Wraps a small scalar network over the 2*(2*width+1) stencil inputs and
    exposes the batched, parameter-differentiable acceleration map used in
    training.  Assembly uses rolls and fixed offset-diagonal masks, so the
    whole path from weights to accelerations stays on the tape.
    """

    def __init__(self, network_config, n, width=1, params=None):
        from .network import init as _net_init

        k = 2 * width + 1
        if network_config.input_dim != 2 * k:
            raise UsageError(
                f"density network must take {2 * k} inputs for width {width}"
            )
        self.config = network_config
        self.n = int(n)
        self.width = int(width)
        self.offsets = np.arange(-width, width + 1)
        self.params = params if params is not None else _net_init(network_config)
        self.dim = self.n
        # Offset-diagonal embedding masks, one per (row, col) offset pair.
        self._masks = {}
        for o in range(-2 * width, 2 * width + 1):
            mask = np.zeros((self.n, self.n))
            rows = np.arange(self.n)
            mask[rows, (rows + o) % self.n] = 1.0
            self._masks[o] = mask

    @property
    def parameter_arrays(self):
        return self.params.arrays

    def _patches(self, Q, QD):
        cols = [ops.roll(Q, -int(o), -1) for o in self.offsets]
        cols += [ops.roll(QD, -int(o), -1) for o in self.offsets]
        return ops.stack(cols, axis=-1)  # (..., n, 2k)

    def batch_accelerations(self, arrays, Q, QD):
        """Accelerations for a batch of fields, differentiable in ``arrays``.

        Returns (acc, h_vv_raw): the traced acceleration of shape
        (batch, n) and the raw velocity-Hessian block for diagnostics.
        """
        batch, n = np.shape(raw_value(Q))
        if n != self.n:
            raise UsageError(f"model built for {self.n} sites, got {n}")
        k = self.offsets.size
        X = self._patches(Q, QD)
        X = ops.reshape(X, (batch * n, 2 * k))
        _, grad, hess = network_bundle(arrays, self.config, X)
        grad = ops.reshape(grad, (batch, n, 2 * k))
        hess = ops.reshape(hess, (batch, n, 2 * k, 2 * k))

        grad_phi = 0.0
        for c in range(k):
            grad_phi = ops.add(
                grad_phi, ops.roll(grad[..., c], int(self.offsets[c]), -1)
            )
        h_vv = 0.0
        mixed = 0.0
        for c in range(k):
            for e in range(k):
                o = int(self.offsets[e] - self.offsets[c])
                mask = self._masks[o]
                rolled_vv = ops.roll(hess[..., k + c, k + e], int(self.offsets[c]), -1)
                h_vv = ops.add(h_vv, ops.mul(ops.reshape(
                    rolled_vv, (batch, n, 1)), mask))
                rolled_vq = ops.roll(hess[..., k + c, e], int(self.offsets[c]), -1)
                mixed = ops.add(mixed, ops.mul(ops.reshape(
                    rolled_vq, (batch, n, 1)), mask))

        qd_col = ops.reshape(QD, (batch, n, 1))
        rhs = ops.sub(grad_phi, ops.reshape(ops.matmul(mixed, qd_col), (batch, n)))
        pinv = ops.trunc_pinv(h_vv, PINV_RTOL)
        acc = ops.reshape(
            ops.matmul(pinv, ops.reshape(rhs, (batch, n, 1))), (batch, n)
        )
        return acc, np.asarray(raw_value(h_vv))

    def local_density(self, arrays=None):
        """The learned density as a stencil-local callable."""
        from .network import network_value

        arrays = self.params.arrays if arrays is None else arrays

        def local(phi_patch, phid_patch):
            X = ops.concatenate([phi_patch, phid_patch], axis=-1)
            return network_value(arrays, self.config, X)

        return local

    def with_arrays(self, arrays):
        from .network import ParameterSet

        return SharedDensityModel(
            self.config, self.n, self.width,
            ParameterSet(arrays=[np.asarray(a, dtype=np.float64) for a in arrays]),
        )


# -- field snapshot files -------------------------------------------------------


def write_field(csv_path, field):
    """Field snapshot: CSV `site,phi,phi_dot` plus a JSON sidecar."""
    csv_path = Path(csv_path)
    lines = ["site,phi,phi_dot"]
    for i in range(field.n):
        lines.append(
            f"{i},{format(field.phi[i], '.17g')},{format(field.phi_dot[i], '.17g')}"
        )
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    sidecar = csv_path.with_name(csv_path.stem + ".meta.json")
    sidecar.write_text(
        json.dumps({"n": field.n, "dx": field.dx, "boundary": field.boundary},
                   sort_keys=True) + "\n",
        encoding="utf-8",
    )


def read_field(csv_path):
    csv_path = Path(csv_path)
    lines = csv_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "site,phi,phi_dot":
        raise DataFormatError("expected header 'site,phi,phi_dot'", 1)
    phi, phid = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise DataFormatError("expected 3 fields", lineno)
        try:
            phi.append(float(parts[1]))
            phid.append(float(parts[2]))
        except ValueError as exc:
            raise DataFormatError(str(exc), lineno) from exc
    sidecar = csv_path.with_name(csv_path.stem + ".meta.json")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    return GridField(np.asarray(phi), np.asarray(phid), dx=float(meta["dx"]),
                     boundary=str(meta.get("boundary", "periodic")))
