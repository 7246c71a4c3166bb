"""Layer graphs: declaration, shape inference, forward and reverse passes."""
from __future__ import annotations

from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import layers as L
from .layers import LayerSpec


class DimensionError(ValueError):
    """Raised when a tensor shape does not fit the layer consuming it."""


class StateError(RuntimeError):
    """Raised when an operation runs in the wrong lifecycle state."""


class Tensor:
    """Dense array plus an optional gradient of identical shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.asarray(data)
        self.grad = grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={'set' if self.grad is not None else None})"


@dataclass(frozen=True)
class Node:
    name: str
    spec: LayerSpec
    inputs: Tuple[str, ...]


@dataclass
class NetworkSpec:
    """Directed acyclic layer graph.

    ``inputs`` maps input names to per-sample shapes (C, H, W) or (F,), in the
    order :meth:`Network.forward` expects them. Only ``fully_connected`` nodes
    accept more than one incoming edge.
    """

    inputs: Dict[str, Tuple[int, ...]]
    nodes: List[Node] = field(default_factory=list)

    def add(self, name, spec, *inputs):
        if name in self.inputs or any(n.name == name for n in self.nodes):
            raise ValueError(f"duplicate node name {name!r}")
        self.nodes.append(Node(name, spec, tuple(inputs)))
        return name

    def node(self, name):
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    @property
    def output(self):
        consumed = {src for n in self.nodes for src in n.inputs}
        sinks = [n.name for n in self.nodes if n.name not in consumed]
        if len(sinks) != 1:
            raise ValueError(f"network must have exactly one output node, found {sinks}")
        return sinks[0]

    def topological_order(self):
        known = set(self.inputs) | {n.name for n in self.nodes}
        graph = {}
        for n in self.nodes:
            missing = [s for s in n.inputs if s not in known]
            if missing:
                raise ValueError(f"node {n.name!r} consumes unknown tensors {missing}")
            if not n.inputs:
                raise ValueError(f"node {n.name!r} has no inputs")
            if len(n.inputs) > 1 and n.spec.kind != "fully_connected":
                raise ValueError(f"node {n.name!r} ({n.spec.kind}) cannot fuse several inputs")
            graph[n.name] = set(n.inputs)
        try:
            order = list(TopologicalSorter(graph).static_order())
        except CycleError as exc:
            raise ValueError(f"network graph has a cycle: {exc.args[1]}") from None
        seen = set(self.inputs)
        for n in self.nodes:
            if not set(n.inputs) <= seen:
                by_name = {m.name: m for m in self.nodes}
                return [by_name[name] for name in order if name in by_name]
            seen.add(n.name)
        return list(self.nodes)

    def validate(self):
        order = self.topological_order()
        reachable = set(self.inputs)
        for n in order:
            if any(s in reachable for s in n.inputs):
                reachable.add(n.name)
        unreachable = [n.name for n in self.nodes if n.name not in reachable]
        if unreachable:
            raise ValueError(f"nodes not reachable from an input: {unreachable}")
        self.output  # noqa: B018 - raises on zero or several sinks
        return order

    def ancestors(self, name):
        """Nodes feeding ``name`` (inclusive), in declaration order."""
        keep, stack = set(), [name]
        while stack:
            name = stack.pop()
            if name in keep or name in self.inputs:
                continue
            keep.add(name)
            stack.extend(self.node(name).inputs)
        return [n for n in self.nodes if n.name in keep]


def infer_shapes(spec: NetworkSpec) -> Dict[str, Tuple[int, ...]]:
    """Per-sample output shape of every input and node."""
    shapes = {k: tuple(v) for k, v in spec.inputs.items()}
    for n in spec.validate():
        s = n.spec
        src = [shapes[i] for i in n.inputs]
        x = src[0]
        if s.kind == "conv2d":
            if len(x) != 3:
                raise DimensionError(f"node {n.name!r}: conv2d needs (C, H, W) input, got {x}")
            kh, kw = s.kernel
            h, w = (x[1], x[2]) if s.padding == "same" else (x[1] - kh + 1, x[2] - kw + 1)
            if h < 1 or w < 1:
                raise DimensionError(f"node {n.name!r}: {x} too small for a {kh}x{kw} kernel")
            shapes[n.name] = (s.filters, h, w)
        elif s.kind == "max_pool2d":
            if len(x) != 3 or x[1] < s.stride[0] or x[2] < s.stride[1]:
                raise DimensionError(f"node {n.name!r}: cannot pool {x} by {s.stride}")
            shapes[n.name] = (x[0], x[1] // s.stride[0], x[2] // s.stride[1])
        elif s.kind == "upsample2d":
            if len(x) != 3:
                raise DimensionError(f"node {n.name!r}: upsample2d needs (C, H, W) input, got {x}")
            shapes[n.name] = (x[0], x[1] * s.stride[0], x[2] * s.stride[1])
        elif s.kind == "fully_connected":
            shapes[n.name] = tuple(s.output_shape) if s.output_shape else (s.units,)
        else:
            shapes[n.name] = x
    return shapes


class Network:
    """Runtime for a :class:`NetworkSpec`: parameters, buffers and caches.

    Parameters are :class:`Tensor` objects keyed ``"<node>.<param>"``.
    Batch-norm running statistics live in ``buffers`` and are not trained.
    """

    def __init__(self, spec: NetworkSpec, dtype=np.float32, seed=None):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.order = spec.validate()
        self.output_name = spec.output
        self.shapes = infer_shapes(spec)
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.mode = "train"
        self.update_running_stats = True
        self.freeze_dropout = False
        self._dropout_masks: Dict[str, np.ndarray] = {}
        self._caches: Optional[dict] = None
        self._output = None
        self._rng = np.random.default_rng(seed)
        self._init_params()

    # -- construction -----------------------------------------------------
    def _init_params(self):
        rng = self._rng
        for n in self.order:
            s = n.spec
            if s.kind == "conv2d":
                cin = self.shapes[n.inputs[0]][0]
                fan_in = cin * s.kernel[0] * s.kernel[1]
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (s.filters, cin) + tuple(s.kernel))
                self.params[f"{n.name}.weight"] = Tensor(w.astype(self.dtype))
                if s.bias:
                    self.params[f"{n.name}.bias"] = Tensor(np.zeros(s.filters, self.dtype))
            elif s.kind == "fully_connected":
                fan_in = sum(int(np.prod(self.shapes[i])) for i in n.inputs)
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, s.units))
                self.params[f"{n.name}.weight"] = Tensor(w.astype(self.dtype))
                if s.bias:
                    self.params[f"{n.name}.bias"] = Tensor(np.zeros(s.units, self.dtype))
            elif s.kind == "batch_norm":
                c = self.shapes[n.inputs[0]][0]
                self.params[f"{n.name}.gamma"] = Tensor(np.ones(c, self.dtype))
                self.params[f"{n.name}.beta"] = Tensor(np.zeros(c, self.dtype))
                self.buffers[f"{n.name}.running_mean"] = np.zeros(c, self.dtype)
                self.buffers[f"{n.name}.running_var"] = np.ones(c, self.dtype)

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        self._caches = None
        return self

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        state = {k: t.data for k, t in self.params.items()}
        state.update(self.buffers)
        return state

    def load_state_dict(self, state, strict=True):
        expected = set(self.params) | set(self.buffers)
        if strict and set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            target = self.params[k].data if k in self.params else self.buffers.get(k)
            if target is None:
                continue
            if target.shape != v.shape:
                raise DimensionError(f"{k}: expected shape {target.shape}, got {v.shape}")
            target[...] = v

    def astype(self, dtype):
        """Copy of this network with parameters and buffers cast to ``dtype``."""
        other = Network.__new__(Network)
        other.__dict__.update(self.__dict__)
        other.dtype = np.dtype(dtype)
        other.params = {k: Tensor(t.data.astype(dtype)) for k, t in self.params.items()}
        other.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        other._dropout_masks = {}
        other._caches = None
        other._rng = np.random.default_rng(self._rng.integers(2**63))
        return other

    # -- forward ------------------------------------------------------------
    def _check_inputs(self, inputs):
        if isinstance(inputs, dict):
            inputs = [inputs[k] for k in self.spec.inputs]
        if isinstance(inputs, (np.ndarray, Tensor)):
            inputs = [inputs]
        if len(inputs) != len(self.spec.inputs):
            raise DimensionError(f"expected {len(self.spec.inputs)} inputs, got {len(inputs)}")
        arrays, batch = {}, None
        for (name, shape), x in zip(self.spec.inputs.items(), inputs):
            x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype)
            if x.shape[1:] != tuple(shape):
                raise DimensionError(f"input {name!r}: expected per-sample shape {tuple(shape)}, got {x.shape[1:]}")
            if batch is not None and x.shape[0] != batch:
                raise DimensionError(f"input {name!r}: batch {x.shape[0]} differs from {batch}")
            batch = x.shape[0]
            arrays[name] = x
        return arrays

    def forward(self, inputs):
        """Run the graph; returns the output node's activations.

        In train mode every node's cache is kept for :meth:`backward`,
        batch norm uses batch statistics and dropout is active.
        """
        acts = self._check_inputs(inputs)
        train = self.mode == "train"
        caches = {} if train else None
        for n in self.order:
            s = n.spec
            x = acts[n.inputs[0]]
            try:
                out, cache = self._forward_node(n, s, x, acts, train)
            except ValueError as exc:
                raise DimensionError(f"node {n.name!r} ({s.kind}): {exc}") from exc
            acts[n.name] = out
            if train:
                caches[n.name] = cache
        self._caches = caches
        self._output = acts[self.output_name] if train else None
        return acts[self.output_name]

    def _forward_node(self, n, s, x, acts, train):
        p = self.params
        if s.kind == "conv2d":
            if x.ndim != 4 or x.shape[1] != p[f"{n.name}.weight"].shape[1]:
                raise DimensionError(f"node {n.name!r}: conv2d got input of shape {x.shape}")
            b = p.get(f"{n.name}.bias")
            return L.conv2d_forward(x, p[f"{n.name}.weight"].data, None if b is None else b.data, s.padding)
        if s.kind == "max_pool2d":
            return L.max_pool2d_forward(x, s.stride)
        if s.kind == "upsample2d":
            return L.upsample2d_forward(x, s.stride)
        if s.kind == "fully_connected":
            xs = [acts[i] for i in n.inputs]
            w = p[f"{n.name}.weight"].data
            if sum(int(np.prod(a.shape[1:])) for a in xs) != w.shape[0]:
                raise DimensionError(f"node {n.name!r}: fully_connected input width mismatch")
            b = p.get(f"{n.name}.bias")
            out, cache = L.fully_connected_forward(xs, w, None if b is None else b.data)
            if s.output_shape:
                out = out.reshape((out.shape[0],) + tuple(s.output_shape))
            return out, cache
        if s.kind == "batch_norm":
            return L.batch_norm_forward(
                x, p[f"{n.name}.gamma"].data, p[f"{n.name}.beta"].data,
                self.buffers[f"{n.name}.running_mean"], self.buffers[f"{n.name}.running_var"],
                train, update_running=self.update_running_stats)
        if s.kind == "elu":
            return L.elu_forward(x)
        if s.kind == "dropout":
            if not train or s.drop_rate == 0.0:
                return x, None
            mask = self._dropout_masks.get(n.name) if self.freeze_dropout else None
            if mask is None or mask.shape != x.shape:
                keep = 1.0 - s.drop_rate
                mask = (self._rng.random(x.shape) < keep).astype(self.dtype) / self.dtype.type(keep)
                self._dropout_masks[n.name] = mask
            return x * mask, mask
        if s.kind == "softmax":
            return L.softmax_forward(x)
        if s.kind == "identity":
            return x, None
        raise AssertionError(s.kind)

    # -- backward -----------------------------------------------------------
    def backward(self, loss_kind, target):
        """Populate ``grad`` on every parameter and return the batch-mean loss.

        ``loss_kind`` is ``"cross_entropy_softmax"`` (the output node must be a
        softmax; ``target`` one-hot or class indices) or ``"mean_squared_error"``.
        """
        if self._caches is None:
            raise StateError("backward() requires a preceding forward() in train mode")
        caches = self._caches
        out_node = self.spec.node(self.output_name)
        grads: Dict[str, np.ndarray] = {}
        if loss_kind == "cross_entropy_softmax":
            if out_node.spec.kind != "softmax":
                raise StateError("cross_entropy_softmax needs a softmax output node")
            logits = caches[out_node.name]
            target = self._one_hot(target, logits.shape)
            logp = L.log_softmax(logits)
            loss = float(-(target * logp).sum() / logits.shape[0])
            grads[out_node.inputs[0]] = (np.exp(logp) - target) / logits.shape[0]
            start = out_node.name
        elif loss_kind == "mean_squared_error":
            out = self._output
            target = np.asarray(target, dtype=self.dtype).reshape(out.shape)
            diff = out - target
            loss = float(np.mean(diff.astype(np.float64) ** 2))
            grads[self.output_name] = (2.0 / diff.size) * diff
            start = None
        else:
            raise ValueError(f"unknown loss kind {loss_kind!r}")

        for n in reversed(self.order):
            if n.name == start or n.name not in grads:
                continue
            self._backward_node(n, grads.pop(n.name), caches[n.name], grads)
        return loss

    def _one_hot(self, target, shape):
        target = np.asarray(target)
        if target.shape == shape:
            return target.astype(self.dtype)
        if target.ndim == 1 and target.shape[0] == shape[0]:
            onehot = np.zeros(shape, self.dtype)
            onehot[np.arange(shape[0]), target.astype(int)] = 1.0
            return onehot
        raise DimensionError(f"target of shape {target.shape} does not match output {shape}")

    def _accumulate(self, grads, name, g):
        if name in self.spec.inputs:
            return
        grads[name] = g if name not in grads else grads[name] + g

    def _needs_dx(self, n):
        return any(i not in self.spec.inputs for i in n.inputs)

    def _set_grad(self, key, g):
        t = self.params[key]
        t.grad = g if t.grad is None else t.grad + g

    def _backward_node(self, n, g, cache, grads):
        s = n.spec
        src = n.inputs[0]
        if s.kind == "conv2d":
            dx, dw, db = L.conv2d_backward(g, cache, need_dx=self._needs_dx(n))
            self._set_grad(f"{n.name}.weight", dw)
            if db is not None:
                self._set_grad(f"{n.name}.bias", db)
            if dx is not None:
                self._accumulate(grads, src, dx)
        elif s.kind == "max_pool2d":
            self._accumulate(grads, src, L.max_pool2d_backward(g, cache))
        elif s.kind == "upsample2d":
            self._accumulate(grads, src, L.upsample2d_backward(g, cache))
        elif s.kind == "fully_connected":
            g = g.reshape(g.shape[0], -1)
            w = self.params[f"{n.name}.weight"].data
            dxs, dw, db = L.fully_connected_backward(g, cache, w, need_dx=self._needs_dx(n))
            self._set_grad(f"{n.name}.weight", dw)
            if s.bias:
                self._set_grad(f"{n.name}.bias", db)
            if dxs is not None:
                for name, dx in zip(n.inputs, dxs):
                    self._accumulate(grads, name, dx)
        elif s.kind == "batch_norm":
            dx, dgamma, dbeta = L.batch_norm_backward(g, cache)
            self._set_grad(f"{n.name}.gamma", dgamma)
            self._set_grad(f"{n.name}.beta", dbeta)
            self._accumulate(grads, src, dx)
        elif s.kind == "elu":
            self._accumulate(grads, src, L.elu_backward(g, cache))
        elif s.kind == "dropout":
            self._accumulate(grads, src, g if cache is None else g * cache)
        elif s.kind == "softmax":
            probs = L.softmax_forward(cache)[0]
            self._accumulate(grads, src, L.softmax_backward(g, probs))
        elif s.kind == "identity":
            self._accumulate(grads, src, g)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def forward_from(self, known):
        """Eval-mode pass that starts from precomputed node activations.

        ``known`` maps node names to activations; every node downstream of
        them is evaluated. All paths to the output must be covered.
        """
        mode, self.mode = self.mode, "eval"
        try:
            acts = dict(known)
            for n in self.order:
                if n.name in acts:
                    continue
                if not all(i in acts for i in n.inputs):
                    continue
                acts[n.name] = self._forward_node(n, n.spec, acts[n.inputs[0]], acts, False)[0]
            if self.output_name not in acts:
                raise StateError("known activations do not cover every path to the output")
            return acts[self.output_name]
        finally:
            self.mode = mode

    def predict(self, inputs, batch_size=256):
        """Eval-mode forward in chunks; does not disturb the current mode."""
        mode, self.mode = self.mode, "eval"
        try:
            arrays = self._check_inputs(inputs)
            names = list(self.spec.inputs)
            n = arrays[names[0]].shape[0]
            outs = []
            for start in range(0, n, batch_size):
                chunk = [arrays[k][start:start + batch_size] for k in names]
                outs.append(self.forward(chunk))
            return np.concatenate(outs, axis=0) if outs else np.empty((0,) + self.shapes[self.output_name], self.dtype)
        finally:
            self.mode = mode
            self._caches = None


def count_parameters(net: Network) -> int:
    return sum(t.data.size for t in net.params.values())
