"""Reverse-mode automatic differentiation over dense 3D tensor operations.

The op set is deliberately small: elementwise arithmetic, reductions,
count-normalized box filtering and pooling, central-difference spatial
gradients, edge-clamped trilinear sampling, integer shifts and border
crops. That is enough to express and differentiate every registration
loss in this package with respect to displacement parameters.

Epsilon policy: raw ``div``/``sqrt`` reject non-positive operands. Losses
that need stabilizing add an explicit epsilon inside the radicand or
denominator before calling them (see the similarity module), so there is
exactly one documented epsilon per formula and finite-difference oracles
can reproduce it.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor3


class TapeError(ValueError):
    """Operation rejected: bad dims, bad domain, or tape misuse."""


class Node:
    """One tape entry: an op, its parents, its value, and (during a
    backward pass) its adjoint. ``needs_grad`` marks nodes on a path from
    a parameter so the reverse sweep can skip dead branches."""

    __slots__ = ("id", "op", "parents", "value", "adjoint", "needs_grad", "_vjp")

    def __init__(self, node_id, op, parents, value, vjp, needs_grad):
        self.id = node_id
        self.op = op
        self.parents = parents
        self.value = value
        self.adjoint = None
        self.needs_grad = needs_grad
        self._vjp = vjp

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


def _box_sum_axis(arr: np.ndarray, axis: int, radius: int) -> np.ndarray:
    """Sliding-window sum of radius r along one axis, truncated at edges."""
    n = arr.shape[axis]
    c = np.cumsum(arr, axis=axis)
    idx_hi = np.minimum(np.arange(n) + radius, n - 1)
    idx_lo = np.arange(n) - radius - 1
    out = np.take(c, idx_hi, axis=axis)
    low = np.take(c, np.clip(idx_lo, 0, None), axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n
    out = out - low * (idx_lo >= 0).reshape(shape)
    return out


def _box_counts(n: int, radius: int) -> np.ndarray:
    i = np.arange(n)
    return np.minimum(i + radius, n - 1) - np.maximum(i - radius, 0) + 1.0


def _pool2_sum_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    """Pairwise sum along one axis; a trailing odd element forms its own bin."""
    a = np.moveaxis(arr, axis, 0)
    n = a.shape[0]
    nev = (n // 2) * 2
    out = a[0:nev:2] + a[1:nev:2]
    if n % 2:
        out = np.concatenate([out, a[n - 1 : n]], axis=0)
    return np.moveaxis(out, 0, axis)


def _pool2_counts(n: int) -> np.ndarray:
    c = np.full((n + 1) // 2, 2.0)
    if n % 2:
        c[-1] = 1.0
    return c


def _grad_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    """Central differences along one axis in normalized coordinates,
    one-sided at the two boundary slices. Length-1 axes yield zeros."""
    n = arr.shape[axis]
    if n < 2:
        return np.zeros_like(arr)
    h = 1.0 / (n - 1)
    a = np.moveaxis(arr, axis, 0)
    out = np.empty_like(a)
    out[0] = (a[1] - a[0]) / h
    out[n - 1] = (a[n - 1] - a[n - 2]) / h
    if n > 2:
        out[1 : n - 1] = (a[2:n] - a[0 : n - 2]) / (2.0 * h)
    return np.moveaxis(out, 0, axis)


def _grad_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of the _grad_axis stencil."""
    n = g.shape[axis]
    if n < 2:
        return np.zeros_like(g)
    h = 1.0 / (n - 1)
    gy = np.moveaxis(g, axis, 0)
    gx = np.zeros_like(gy)
    gx[0] -= gy[0] / h
    gx[1] += gy[0] / h
    gx[n - 1] += gy[n - 1] / h
    gx[n - 2] -= gy[n - 1] / h
    if n > 2:
        gx[2:n] += gy[1 : n - 1] / (2.0 * h)
        gx[0 : n - 2] -= gy[1 : n - 1] / (2.0 * h)
    return np.moveaxis(gx, 0, axis)


def _trilinear_setup(img_dims, coords: np.ndarray):
    """Index/weight preparation shared by the forward and backward passes.

    Coordinates are clamped to [0,1] and mapped onto node index space
    (node i at i/(n-1)). Returns floor indices, fractional weights, and a
    per-axis mask that is 0 where the raw coordinate left the domain (the
    clamp makes the sampled value constant there).
    """
    i0s, fracs, inside = [], [], []
    for axis in range(3):
        n = img_dims[axis]
        c_raw = coords[..., axis]
        c = np.clip(c_raw, 0.0, 1.0)
        if n > 1:
            p = c * (n - 1)
            # snap to the node when within 1e-9 index units so sampling at
            # voxel centers reproduces stored values exactly
            p_round = np.round(p)
            p = np.where(np.abs(p - p_round) < 1e-9, p_round, p)
            i0 = np.minimum(p.astype(np.int64), n - 2)
            f = p - i0
        else:
            i0 = np.zeros(c.shape, dtype=np.int64)
            f = np.zeros_like(c)
        i0s.append(i0)
        fracs.append(f)
        inside.append(((c_raw >= 0.0) & (c_raw <= 1.0)).astype(np.float64))
    return i0s, fracs, inside


class _TrilinearPlan:
    """Flat gather indices, weights, and cached corner values for the 8
    interpolation corners. Built once in the forward pass, reused by both
    vjp halves."""

    __slots__ = ("img_shape", "fracs", "inside", "ravels", "weights", "values", "out")

    def __init__(self, img: np.ndarray, i0s, fracs, inside):
        nx, ny, nz = img.shape[:3]
        nc = img.shape[3]
        self.img_shape = img.shape
        self.fracs = fracs
        self.inside = inside
        flat = img.reshape(-1, nc)
        idx = []
        for axis, n in enumerate((nx, ny, nz)):
            hi = np.minimum(i0s[axis] + 1, n - 1)
            idx.append((i0s[axis], hi))
        w_parts = [(1.0 - fracs[a], fracs[a]) for a in range(3)]
        self.ravels, self.weights, self.values = [], [], []
        out = None
        for bx in (0, 1):
            for by in (0, 1):
                for bz in (0, 1):
                    rav = (idx[0][bx] * ny + idx[1][by]) * nz + idx[2][bz]
                    w = w_parts[0][bx] * w_parts[1][by] * w_parts[2][bz]
                    v = flat.take(rav.ravel(), axis=0).reshape(*rav.shape, nc)
                    self.ravels.append(rav)
                    self.weights.append(w)
                    self.values.append(v)
                    term = w[..., None] * v
                    out = term if out is None else out + term
        self.out = out

    def corner_value(self, bx, by, bz):
        return self.values[(bx << 2) | (by << 1) | bz]

    def grad_image(self, g: np.ndarray) -> np.ndarray:
        nx, ny, nz, nc = self.img_shape
        acc = np.zeros((nx * ny * nz, nc))
        for rav, w in zip(self.ravels, self.weights):
            wg = w[..., None] * g
            flat_idx = rav.ravel()
            for c in range(nc):
                acc[:, c] += np.bincount(
                    flat_idx, weights=wg[..., c].ravel(), minlength=nx * ny * nz
                )
        return acc.reshape(self.img_shape)

    def grad_coords(self, g: np.ndarray) -> np.ndarray:
        """Corner-difference blend per axis, scaled by the coordinate-to-
        index factor, masked where the clamp saturates."""
        fr = self.fracs
        w0 = (1.0 - fr[0], fr[0])
        w1 = (1.0 - fr[1], fr[1])
        w2 = (1.0 - fr[2], fr[2])
        g_coords = np.empty((*g.shape[:3], 3))
        gx = 0.0
        for by in (0, 1):
            for bz in (0, 1):
                diff = self.corner_value(1, by, bz) - self.corner_value(0, by, bz)
                gx = gx + (w1[by] * w2[bz]) * np.einsum("...c,...c->...", diff, g)
        gy = 0.0
        for bx in (0, 1):
            for bz in (0, 1):
                diff = self.corner_value(bx, 1, bz) - self.corner_value(bx, 0, bz)
                gy = gy + (w0[bx] * w2[bz]) * np.einsum("...c,...c->...", diff, g)
        gz = 0.0
        for bx in (0, 1):
            for by in (0, 1):
                diff = self.corner_value(bx, by, 1) - self.corner_value(bx, by, 0)
                gz = gz + (w0[bx] * w1[by]) * np.einsum("...c,...c->...", diff, g)
        for axis, comp in enumerate((gx, gy, gz)):
            n = self.img_shape[axis]
            factor = (n - 1) if n > 1 else 0.0
            g_coords[..., axis] = comp * factor * self.inside[axis]
        return g_coords


def sample_trilinear_values(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Plain (non-tape) trilinear sampling, same kernel as the tape op.

    ``img`` is (nx, ny, nz, C); ``coords`` is (..., 3) in normalized
    coordinates, edge-clamped to the unit cube.
    """
    i0s, fracs, inside = _trilinear_setup(img.shape[:3], coords)
    return _TrilinearPlan(img, i0s, fracs, inside).out


def sample_nearest_values(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Nearest-node sampling with edge clamp, for label volumes."""
    idx = []
    for axis in range(3):
        n = img.shape[axis]
        c = np.clip(coords[..., axis], 0.0, 1.0)
        idx.append(np.clip(np.round(c * (n - 1)).astype(np.int64), 0, n - 1))
    return img[idx[0], idx[1], idx[2], :]


class Tape:
    """Single-owner op recorder with one reverse sweep per built graph.

    Values are retained until backward (no checkpointing); after
    ``reset`` the tape can be rebuilt from scratch. Distinct tapes are
    independent and safe to use on distinct threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameter_ids: set[int] = set()

    # -- construction -----------------------------------------------------

    def input(self, value, parameter: bool = False) -> Node:
        t = value if isinstance(value, Tensor3) else Tensor3(value)
        node = Node(
            len(self.nodes), "param" if parameter else "input", (), t, None, parameter
        )
        self.nodes.append(node)
        if parameter:
            self.parameter_ids.add(node.id)
        return node

    def reset(self):
        self.nodes.clear()
        self.parameter_ids.clear()

    def _append(self, op, parents, value, vjp) -> Node:
        if isinstance(value, np.ndarray):
            value = Tensor3._wrap(value)
        needs = any(p.needs_grad for p in parents)
        node = Node(len(self.nodes), op, tuple(p.id for p in parents), value, vjp, needs)
        self.nodes.append(node)
        return node

    def _check_elementwise(self, op, a: Node, b: Node):
        if a.value.shape != b.value.shape:
            raise TapeError(
                f"{op}: operand shapes differ: {a.value.shape} vs {b.value.shape}"
            )

    # -- elementwise ops ---------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        self._check_elementwise("add", a, b)
        val = a.value.data + b.value.data
        return self._append("add", (a, b), val, lambda g: [(a.id, g), (b.id, g)])

    def sub(self, a: Node, b: Node) -> Node:
        self._check_elementwise("sub", a, b)
        val = a.value.data - b.value.data
        return self._append("sub", (a, b), val, lambda g: [(a.id, g), (b.id, -g)])

    def mul(self, a: Node, b: Node) -> Node:
        self._check_elementwise("mul", a, b)
        av, bv = a.value.data, b.value.data
        return self._append(
            "mul", (a, b), av * bv, lambda g: [(a.id, g * bv), (b.id, g * av)]
        )

    def div(self, a: Node, b: Node) -> Node:
        self._check_elementwise("div", a, b)
        av, bv = a.value.data, b.value.data
        if np.min(bv) <= 0.0:
            raise TapeError("div: non-positive denominator (add an epsilon upstream)")
        return self._append(
            "div", (a, b), av / bv,
            lambda g: [(a.id, g / bv), (b.id, -g * av / (bv * bv))],
        )

    def scale(self, a: Node, k: float) -> Node:
        k = float(k)
        return self._append("scale", (a,), a.value.data * k, lambda g: [(a.id, g * k)])

    def add_const(self, a: Node, k: float) -> Node:
        k = float(k)
        return self._append("add_const", (a,), a.value.data + k, lambda g: [(a.id, g)])

    def square(self, a: Node) -> Node:
        av = a.value.data
        return self._append("square", (a,), av * av, lambda g: [(a.id, 2.0 * av * g)])

    def sqrt(self, a: Node) -> Node:
        av = a.value.data
        if np.min(av) <= 0.0:
            raise TapeError("sqrt: non-positive radicand (add an epsilon upstream)")
        rt = np.sqrt(av)
        return self._append("sqrt", (a,), rt, lambda g: [(a.id, g / (2.0 * rt))])

    def exp(self, a: Node) -> Node:
        ev = np.exp(a.value.data)
        return self._append("exp", (a,), ev, lambda g: [(a.id, g * ev)])

    def clamp(self, a: Node, lo: float | None = None, hi: float | None = None) -> Node:
        if lo is None and hi is None:
            raise TapeError("clamp: at least one bound required")
        av = a.value.data
        val = np.clip(av, lo, hi)
        pass_mask = np.ones_like(av)
        if lo is not None:
            pass_mask *= av > lo
        if hi is not None:
            pass_mask *= av < hi
        return self._append("clamp", (a,), val, lambda g: [(a.id, g * pass_mask)])

    def concat_channels(self, nodes: list[Node]) -> Node:
        if not nodes:
            raise TapeError("concat_channels: need at least one node")
        dims = nodes[0].value.dims
        for n in nodes:
            if n.value.dims != dims:
                raise TapeError(
                    f"concat_channels: spatial dims differ: {n.value.dims} vs {dims}"
                )
        val = np.concatenate([n.value.data for n in nodes], axis=3)
        widths = [n.value.channels for n in nodes]

        def vjp(g):
            out, start = [], 0
            for node, w in zip(nodes, widths):
                out.append((node.id, g[..., start : start + w]))
                start += w
            return out

        return self._append("concat_channels", tuple(nodes), val, vjp)

    # -- reductions ---------------------------------------------------------

    def sum(self, a: Node) -> Node:
        shape = a.value.shape
        val = Tensor3.scalar(float(np.sum(a.value.data)))
        return self._append(
            "sum", (a,), val, lambda g: [(a.id, np.full(shape, g.reshape(())))]
        )

    def mean(self, a: Node) -> Node:
        shape = a.value.shape
        n = a.value.size
        val = Tensor3.scalar(float(np.sum(a.value.data)) / n)
        return self._append(
            "mean", (a,), val, lambda g: [(a.id, np.full(shape, g.reshape(()) / n))]
        )

    # -- spatial ops ----------------------------------------------------------

    def avg_pool2(self, a: Node) -> Node:
        """Halve each spatial dim by 2x2x2 block means; a trailing odd slice
        forms a partial block averaged over the voxels it actually has."""
        av = a.value.data
        counts = 1.0
        pooled = av
        for axis in range(3):
            pooled = _pool2_sum_axis(pooled, axis)
            shape = [1] * 4
            shape[axis] = pooled.shape[axis]
            counts = counts * _pool2_counts(av.shape[axis]).reshape(shape)
        val = pooled / counts
        in_shape = av.shape

        def vjp(g):
            spread = g / counts
            for axis in range(3):
                reps = np.full(g.shape[axis], 2, dtype=np.int64)
                if in_shape[axis] % 2:
                    reps[-1] = 1
                spread = np.repeat(spread, reps, axis=axis)
            return [(a.id, spread)]

        return self._append("avg_pool2", (a,), val, vjp)

    def box_filter(self, a: Node, radius: int) -> Node:
        """Separable box mean of the given radius per axis; boundary windows
        are averaged over the voxels present (count-normalized, no padding)."""
        if radius < 1:
            raise TapeError(f"box_filter: radius must be >= 1, got {radius}")
        av = a.value.data
        out = av
        counts = []
        for axis in range(3):
            c = _box_counts(av.shape[axis], radius)
            shape = [1] * 4
            shape[axis] = av.shape[axis]
            c = c.reshape(shape)
            counts.append(c)
            out = _box_sum_axis(out, axis, radius) / c
        val = out

        def vjp(g):
            back = g
            for axis in range(3):
                back = _box_sum_axis(back / counts[axis], axis, radius)
            return [(a.id, back)]

        return self._append("box_filter", (a,), val, vjp)

    def spatial_gradient(self, a: Node) -> Node:
        """Per-channel gradient in normalized coordinates: central differences
        inside, one-sided at boundaries. Output channel 3*c+axis holds
        d(channel c)/d(axis)."""
        av = a.value.data
        nc = av.shape[3]
        out = np.empty(av.shape[:3] + (3 * nc,))
        for c in range(nc):
            for axis in range(3):
                out[..., 3 * c + axis] = _grad_axis(av[..., c], axis)
        val = out

        def vjp(g):
            back = np.zeros(av.shape)
            for c in range(nc):
                for axis in range(3):
                    back[..., c] += _grad_axis_adjoint(g[..., 3 * c + axis], axis)
            return [(a.id, back)]

        return self._append("spatial_gradient", (a,), val, vjp)

    def trilinear_sample(self, image: Node, coords: Node) -> Node:
        """Sample ``image`` at continuous normalized coordinates with edge
        clamp. Differentiable in both the image and the coordinates."""
        if coords.value.channels != 3:
            raise TapeError(
                f"trilinear_sample: coords need 3 channels, got {coords.value.channels}"
            )
        i0s, fracs, inside = _trilinear_setup(image.value.dims, coords.value.data)
        plan = _TrilinearPlan(image.value.data, i0s, fracs, inside)

        def vjp(g):
            out = []
            if image.needs_grad:
                out.append((image.id, plan.grad_image(g)))
            if coords.needs_grad:
                out.append((coords.id, plan.grad_coords(g)))
            return out

        return self._append("trilinear_sample", (image, coords), plan.out, vjp)

    def shift(self, a: Node, offset) -> Node:
        """Integer-voxel shift with edge clamp: out(x) = in(clip(x + offset))."""
        av = a.value.data
        idx = tuple(
            np.clip(np.arange(av.shape[axis]) + int(offset[axis]), 0, av.shape[axis] - 1)
            for axis in range(3)
        )
        sel = np.ix_(*idx)
        val = av[sel]

        def vjp(g):
            back = np.zeros_like(av)
            np.add.at(back, sel, g)
            return [(a.id, back)]

        return self._append("shift", (a,), val, vjp)

    def crop_border(self, a: Node, width: int = 1) -> Node:
        """Drop ``width`` voxels from every spatial face."""
        av = a.value.data
        if min(av.shape[:3]) <= 2 * width:
            raise TapeError(f"crop_border: dims {av.shape[:3]} too small for width {width}")
        sl = slice(width, -width)
        val = av[sl, sl, sl, :]

        def vjp(g):
            back = np.zeros_like(av)
            back[sl, sl, sl, :] = g
            return [(a.id, back)]

        return self._append("crop_border", (a,), val, vjp)

    # -- backward ------------------------------------------------------------

    def backward(self, loss: Node) -> dict[int, Tensor3]:
        """Reverse sweep from a scalar loss; returns one gradient per
        flagged parameter (zero tensors for parameters the loss never saw)."""
        if loss.value.shape != (1, 1, 1, 1):
            raise TapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
        if loss.id >= len(self.nodes) or self.nodes[loss.id] is not loss:
            raise TapeError("backward: loss node does not belong to this tape")
        for node in self.nodes:
            node.adjoint = None
        loss.adjoint = np.ones((1, 1, 1, 1))
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.adjoint is None or node._vjp is None or not node.needs_grad:
                continue
            for parent_id, contrib in node._vjp(node.adjoint):
                parent = self.nodes[parent_id]
                if not parent.needs_grad:
                    continue
                if parent.adjoint is None:
                    parent.adjoint = np.array(contrib, dtype=np.float64, copy=True)
                else:
                    parent.adjoint += contrib
        grads = {}
        for pid in self.parameter_ids:
            node = self.nodes[pid]
            if node.adjoint is None:
                grads[pid] = Tensor3.zeros(node.value.dims, node.value.channels)
            else:
                grads[pid] = Tensor3(node.adjoint)
        for node in self.nodes:
            if node.id not in self.parameter_ids:
                node.adjoint = None
        return grads


def grad_check(f, x0: Tensor3, h: float = 1e-4, n_coords: int = 64, seed: int = 0) -> float:
    """Max relative error between f's analytic gradient and central finite
    differences at a fixed random sample of coordinates.

    ``f`` maps a Tensor3 to ``(value, gradient Tensor3)``. At least 64
    coordinates are probed (all of them on smaller tensors).
    """
    value, grad = f(x0)
    if not np.isfinite(value):
        raise TapeError("grad_check: non-finite function value at x0")
    flat_grad = grad.data.ravel()
    size = x0.size
    rng = np.random.default_rng(seed)
    if size <= n_coords:
        coords = np.arange(size)
    else:
        coords = rng.choice(size, size=max(n_coords, 64), replace=False)
    base = x0.data.ravel().copy()
    worst = 0.0
    for i in coords:
        bumped = base.copy()
        bumped[i] = base[i] + h
        f_hi, _ = f(Tensor3(bumped.reshape(x0.shape)))
        bumped[i] = base[i] - h
        f_lo, _ = f(Tensor3(bumped.reshape(x0.shape)))
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise TapeError(f"grad_check: non-finite function value near coordinate {i}")
        numeric = (f_hi - f_lo) / (2.0 * h)
        analytic = flat_grad[i]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
