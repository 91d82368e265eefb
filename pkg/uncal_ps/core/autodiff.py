#!/usr/bin/env python3
"""
Reverse-mode automatic differentiation over dense float64 arrays
反向模式自动微分 - 逐次记录（define-by-run）的计算磁带

Every loss evaluation records its primitives on a fresh :class:`Tape`; a single
reverse sweep then accumulates ``d root / d var`` into ``Var.grad`` for every Var
that was reached. Primitives live in the ``PRIMITIVES`` registry and are invoked
through :func:`record`.
"""
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from uncal_ps.utils.logger import debug

ArrayLike = Union[float, int, np.ndarray, "Var"]
GradTuple = Tuple[Optional[np.ndarray], ...]


class ShapeError(ValueError):
    """某个原语的输入形状不合法"""

    def __init__(self, primitive: str, shapes: Sequence[Tuple[int, ...]], detail: str = "") -> None:
        shape_str = ", ".join(str(tuple(s)) for s in shapes)
        suffix = f": {detail}" if detail else ""
        super().__init__(f"primitive '{primitive}' rejected operand shapes [{shape_str}]{suffix}")
        self.primitive = primitive
        self.shapes = [tuple(s) for s in shapes]


class OptimizerError(RuntimeError):
    """优化器步进失败（梯度中出现NaN/Inf）"""


# ==================== Var / Tape ====================


class Var:
    """可微分数组节点

    ``value`` is a float64 array of any rank. ``grad`` is allocated lazily as zeros of
    the same shape. Constants (``requires_grad=False``) never accumulate gradient.
    """

    __array_priority__ = 100.0

    def __init__(self, value: Any, requires_grad: bool = False, name: Optional[str] = None) -> None:
        if requires_grad:
            self.value = np.array(value, dtype=np.float64, copy=True)
        else:
            self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.tape: Optional["Tape"] = None
        self._grad: Optional[np.ndarray] = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise ShapeError("grad", [self.value.shape, value.shape], "gradient must match value shape")
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True).reshape(self.value.shape)
        else:
            self._grad += g

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.value.shape)

    @property
    def ndim(self) -> int:
        return int(self.value.ndim)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Var{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # 运算符重载
    def __add__(self, other: ArrayLike) -> "Var":
        return record("add", [self, as_var(other)])

    def __radd__(self, other: ArrayLike) -> "Var":
        return record("add", [as_var(other), self])

    def __sub__(self, other: ArrayLike) -> "Var":
        return record("sub", [self, as_var(other)])

    def __rsub__(self, other: ArrayLike) -> "Var":
        return record("sub", [as_var(other), self])

    def __mul__(self, other: ArrayLike) -> "Var":
        return record("mul", [self, as_var(other)])

    def __rmul__(self, other: ArrayLike) -> "Var":
        return record("mul", [as_var(other), self])

    def __truediv__(self, other: ArrayLike) -> "Var":
        return record("div", [self, as_var(other)])

    def __rtruediv__(self, other: ArrayLike) -> "Var":
        return record("div", [as_var(other), self])

    def __neg__(self) -> "Var":
        return record("neg", [self])

    def __pow__(self, exponent: float) -> "Var":
        return record("power", [self], p=float(exponent))

    def __matmul__(self, other: ArrayLike) -> "Var":
        return record("matmul", [self, as_var(other)])

    def __getitem__(self, key: Any) -> "Var":
        return record("getitem", [self], key=key)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Var":
        return record("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Var":
        return record("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Var":
        target = shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape
        return record("reshape", [self], shape=tuple(int(s) for s in target))


@dataclass
class Node:
    """磁带上的一条记录"""

    primitive: "Primitive"
    inputs: Tuple[Var, ...]
    output: Var
    attrs: Dict[str, Any]
    cache: Any = None


class Tape:
    """计算磁带 - 按拓扑顺序追加的原语记录"""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.branches: List[Tuple[str, np.ndarray]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def append(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, root: Var) -> None:
        backward(root)

    def note_branch(self, label: str, decision: Any) -> None:
        """记录一次不可微的离散选择（符号、argmin、网格单元、掩码）"""
        self.branches.append((label, np.array(decision, copy=True)))

    def same_branches(self, other: "Tape") -> bool:
        """两次记录是否走了完全相同的分支；不同则两次取值之间跨过了拐点"""
        if len(self.branches) != len(other.branches):
            return False
        for (label_a, a), (label_b, b) in zip(self.branches, other.branches):
            if label_a != label_b or a.shape != b.shape or not np.array_equal(a, b):
                return False
        return True


_local = threading.local()


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_var(x: ArrayLike) -> Var:
    return x if isinstance(x, Var) else Var(x)


def constant(x: Any) -> Var:
    return Var(x, requires_grad=False)


def parameter(x: Any, name: str) -> Var:
    return Var(x, requires_grad=True, name=name)


# ==================== 原语注册表 ====================


@dataclass
class Primitive:
    """原语定义: forward(*values, **attrs) -> (out, cache); vjp(g, out, values, cache, **attrs) -> grads

    Non-smooth primitives also define ``branch(values, cache, **attrs)``, the discrete
    choice (sign, argmin, cell, mask) their derivative depends on.
    """

    name: str
    forward: Callable[..., Tuple[np.ndarray, Any]]
    vjp: Callable[..., GradTuple]
    check: Optional[Callable[..., Optional[str]]] = None
    arity: Optional[int] = None
    branch: Optional[Callable[..., Any]] = None


PRIMITIVES: Dict[str, Primitive] = {}


def _register(
    name: str,
    forward: Callable[..., Tuple[np.ndarray, Any]],
    vjp: Callable[..., GradTuple],
    check: Optional[Callable[..., Optional[str]]] = None,
    arity: Optional[int] = 1,
    branch: Optional[Callable[..., Any]] = None,
) -> None:
    PRIMITIVES[name] = Primitive(name=name, forward=forward, vjp=vjp, check=check, arity=arity, branch=branch)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回输入形状"""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(*values: np.ndarray, **_: Any) -> Optional[str]:
    try:
        np.broadcast_shapes(*(v.shape for v in values))
    except ValueError:
        return "operands cannot be broadcast together"
    return None


def _elementwise(
    name: str,
    fn: Callable[..., np.ndarray],
    vjp: Callable[..., GradTuple],
    arity: int = 2,
    branch: Optional[Callable[..., Any]] = None,
) -> None:
    check = _check_broadcast if arity > 1 else None
    _register(name, lambda *v, **a: (fn(*v, **a), None), vjp, check, arity, branch)


_elementwise("add", lambda a, b: a + b, lambda g, out, v, c: (g, g))
_elementwise("sub", lambda a, b: a - b, lambda g, out, v, c: (g, -g))
_elementwise("mul", lambda a, b: a * b, lambda g, out, v, c: (g * v[1], g * v[0]))
_elementwise("div", lambda a, b: a / b, lambda g, out, v, c: (g / v[1], -g * out / v[1]))
_elementwise("neg", lambda a: -a, lambda g, out, v, c: (-g,), arity=1)
_elementwise(
    "abs",
    np.abs,
    lambda g, out, v, c: (g * np.sign(v[0]),),
    arity=1,
    branch=lambda v, cache: np.sign(v[0]),
)
_elementwise("exp", np.exp, lambda g, out, v, c: (g * out,), arity=1)
_elementwise("log", np.log, lambda g, out, v, c: (g / v[0],), arity=1)
_elementwise("sqrt", np.sqrt, lambda g, out, v, c: (g * 0.5 / out,), arity=1)
_elementwise("sigmoid", expit, lambda g, out, v, c: (g * out * (1.0 - out),), arity=1)
_elementwise("tanh", np.tanh, lambda g, out, v, c: (g * (1.0 - out * out),), arity=1)
_elementwise("sin", np.sin, lambda g, out, v, c: (g * np.cos(v[0]),), arity=1)
_elementwise("cos", np.cos, lambda g, out, v, c: (-g * np.sin(v[0]),), arity=1)
_elementwise(
    "power",
    lambda a, p: np.power(a, p),
    lambda g, out, v, c, p: (g * p * np.power(v[0], p - 1.0),),
    arity=1,
)
_elementwise(
    "softplus",
    lambda a, beta=1.0: np.logaddexp(0.0, beta * a) / beta,
    lambda g, out, v, c, beta=1.0: (g * expit(beta * v[0]),),
    arity=1,
)
# max(x, c) 在 x == c 处的次梯度取 0
_elementwise(
    "maximum",
    lambda a, c: np.maximum(a, c),
    lambda g, out, v, cache, c: (g * (v[0] > c),),
    arity=1,
    branch=lambda v, cache, c: v[0] > c,
)
_elementwise(
    "clip",
    lambda a, lo, hi: np.clip(a, lo, hi),
    lambda g, out, v, c, lo, hi: (g * ((v[0] > lo) & (v[0] < hi)),),
    arity=1,
    branch=lambda v, cache, lo, hi: (v[0] > lo).astype(np.int8) + (v[0] >= hi),
)


def _where_forward(a: np.ndarray, b: np.ndarray, cond: np.ndarray) -> Tuple[np.ndarray, Any]:
    return np.where(cond, a, b), None


def _where_vjp(g: np.ndarray, out: np.ndarray, v: Sequence[np.ndarray], c: Any, cond: np.ndarray) -> GradTuple:
    zero = np.zeros((), dtype=np.float64)
    return np.where(cond, g, zero), np.where(cond, zero, g)


def _where_check(a: np.ndarray, b: np.ndarray, cond: np.ndarray) -> Optional[str]:
    try:
        np.broadcast_shapes(a.shape, b.shape, np.shape(cond))
    except ValueError:
        return f"condition shape {np.shape(cond)} does not broadcast with the branches"
    return None


_register("where", _where_forward, _where_vjp, _where_check, arity=2, branch=lambda v, cache, cond: cond)


def _matmul_check(a: np.ndarray, b: np.ndarray) -> Optional[str]:
    if a.ndim < 2 or b.ndim < 2:
        return "matmul operands must be at least 2-D"
    if a.shape[-1] != b.shape[-2]:
        return f"inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]})"
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        return "batch dimensions cannot be broadcast"
    return None


_register(
    "matmul",
    lambda a, b: (a @ b, None),
    lambda g, out, v, c: (g @ np.swapaxes(v[1], -1, -2), np.swapaxes(v[0], -1, -2) @ g),
    _matmul_check,
    arity=2,
)


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int], keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _axis_check(a: np.ndarray, axis: Optional[int] = None, **_: Any) -> Optional[str]:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        return f"axis {axis} out of range for rank {a.ndim}"
    return None


_register(
    "sum",
    lambda a, axis=None, keepdims=False: (np.sum(a, axis=axis, keepdims=keepdims), None),
    lambda g, out, v, c, axis=None, keepdims=False: (_expand_reduced(g, v[0].shape, axis, keepdims),),
    _axis_check,
)


def _mean_vjp(
    g: np.ndarray, out: np.ndarray, v: Sequence[np.ndarray], c: Any, axis: Optional[int] = None, keepdims: bool = False
) -> GradTuple:
    count = v[0].size if axis is None else v[0].shape[axis]
    return (_expand_reduced(g, v[0].shape, axis, keepdims) / count,)


def _mean_check(a: np.ndarray, axis: Optional[int] = None, **kw: Any) -> Optional[str]:
    if a.size == 0:
        return "mean of an empty array"
    return _axis_check(a, axis)


_register(
    "mean",
    lambda a, axis=None, keepdims=False: (np.mean(a, axis=axis, keepdims=keepdims), None),
    _mean_vjp,
    _mean_check,
)


def _min_forward(a: np.ndarray, axis: Optional[int] = None) -> Tuple[np.ndarray, Any]:
    # np.argmin 在并列时返回第一个最小值的下标
    if axis is None:
        idx = int(np.argmin(a))
        return np.asarray(a.reshape(-1)[idx]), idx
    idx = np.expand_dims(np.argmin(a, axis=axis), axis)
    return np.take_along_axis(a, idx, axis=axis).squeeze(axis), idx


def _min_vjp(
    g: np.ndarray, out: np.ndarray, v: Sequence[np.ndarray], idx: Any, axis: Optional[int] = None
) -> GradTuple:
    grad = np.zeros_like(v[0])
    if axis is None:
        grad.reshape(-1)[idx] = g
    else:
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
    return (grad,)


def _min_check(a: np.ndarray, axis: Optional[int] = None) -> Optional[str]:
    if a.size == 0 or (axis is not None and -a.ndim <= axis < a.ndim and a.shape[axis] == 0):
        return "min-reduce over an empty axis"
    return _axis_check(a, axis)


_register("min", _min_forward, _min_vjp, _min_check, branch=lambda v, idx, axis=None: np.asarray(idx))


def _gather_check(a: np.ndarray, index: np.ndarray, axis: int = 0) -> Optional[str]:
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        return "gather index must be integer"
    if a.ndim == 0:
        return "cannot gather from a scalar"
    n = a.shape[axis]
    if index.size and (index.min() < -n or index.max() >= n):
        return f"gather index out of range for axis of length {n}"
    return None


def _gather_vjp(
    g: np.ndarray, out: np.ndarray, v: Sequence[np.ndarray], c: Any, index: np.ndarray, axis: int = 0
) -> GradTuple:
    src = v[0]
    index = np.asarray(index)
    if src.ndim == 1:
        # bincount 比 np.add.at 快一个数量级
        return (np.bincount(index.reshape(-1) % src.shape[0], weights=g.reshape(-1), minlength=src.shape[0]),)
    grad = np.zeros_like(src)
    np.add.at(grad, (slice(None),) * (axis % src.ndim) + (index,), g)
    return (grad,)


_register(
    "gather",
    lambda a, index, axis=0: (np.take(a, index, axis=axis), None),
    _gather_vjp,
    _gather_check,
)


def _scatter_forward(a: np.ndarray, index: np.ndarray, size: int, axis: int = 0) -> Tuple[np.ndarray, Any]:
    index = np.asarray(index)
    out_shape = a.shape[:axis] + (size,) + a.shape[axis + index.ndim :]
    out = np.zeros(out_shape, dtype=np.float64)
    np.add.at(out, (slice(None),) * axis + (index,), a)
    return out, None


def _scatter_check(a: np.ndarray, index: np.ndarray, size: int, axis: int = 0) -> Optional[str]:
    index = np.asarray(index)
    if a.shape[axis : axis + index.ndim] != index.shape:
        return f"index shape {index.shape} does not match source axes {a.shape[axis:axis + index.ndim]}"
    if index.size and (index.min() < 0 or index.max() >= size):
        return f"scatter index out of range for size {size}"
    return None


_register(
    "scatter",
    _scatter_forward,
    lambda g, out, v, c, index, size, axis=0: (np.take(g, index, axis=axis),),
    _scatter_check,
)


def _broadcast_check(a: np.ndarray, shape: Tuple[int, ...]) -> Optional[str]:
    try:
        if np.broadcast_shapes(a.shape, shape) != tuple(shape):
            return f"cannot broadcast to {tuple(shape)}"
    except ValueError:
        return f"cannot broadcast to {tuple(shape)}"
    return None


_register(
    "broadcast",
    lambda a, shape: (np.broadcast_to(a, shape), None),
    lambda g, out, v, c, shape: (_unbroadcast(g, v[0].shape),),
    _broadcast_check,
)


def _reshape_check(a: np.ndarray, shape: Tuple[int, ...]) -> Optional[str]:
    try:
        np.empty(a.shape).reshape(shape)
    except ValueError:
        return f"cannot reshape into {tuple(shape)}"
    return None


_register(
    "reshape",
    lambda a, shape: (a.reshape(shape), None),
    lambda g, out, v, c, shape: (g.reshape(v[0].shape),),
    _reshape_check,
)


def _getitem_vjp(g: np.ndarray, out: np.ndarray, v: Sequence[np.ndarray], c: Any, key: Any) -> GradTuple:
    grad = np.zeros_like(v[0])
    parts = key if isinstance(key, tuple) else (key,)
    if all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts):
        # 基本索引不会重复命中同一元素
        grad[key] = g
    else:
        np.add.at(grad, key, g)
    return (grad,)


_register("getitem", lambda a, key: (np.asarray(a[key]), None), _getitem_vjp)


def _concat_vjp(g: np.ndarray, out: np.ndarray, v: Sequence[np.ndarray], c: Any, axis: int = 0) -> GradTuple:
    splits = np.cumsum([x.shape[axis] for x in v])[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _concat_check(*values: np.ndarray, axis: int = 0) -> Optional[str]:
    shapes = [list(x.shape) for x in values]
    if any(len(s) != len(shapes[0]) for s in shapes):
        return "concat operands must share rank"
    for s in shapes:
        s[axis] = 0
    if any(s != shapes[0] for s in shapes):
        return f"non-concatenated axes differ (axis={axis})"
    return None


_register(
    "concat",
    lambda *v, axis=0: (np.concatenate(v, axis=axis), None),
    _concat_vjp,
    _concat_check,
    arity=None,
)


def _stack_check(*values: np.ndarray, axis: int = 0) -> Optional[str]:
    if any(x.shape != values[0].shape for x in values):
        return "stack operands must share shape"
    return None


_register(
    "stack",
    lambda *v, axis=0: (np.stack(v, axis=axis), None),
    lambda g, out, v, c, axis=0: tuple(np.take(g, i, axis=axis) for i in range(len(v))),
    _stack_check,
    arity=None,
)


def _bilinear_forward(grid: np.ndarray, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, Any]:
    """网格双线性插值，超出网格的查询被截断到边界"""
    height, width = grid.shape
    xc = np.clip(x, 0.0, width - 1.0)
    yc = np.clip(y, 0.0, height - 1.0)
    x0 = np.minimum(np.floor(xc), max(width - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(yc), max(height - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = xc - x0
    fy = yc - y0
    flat = grid.reshape(-1)
    w00 = flat[y0 * width + x0]
    w01 = flat[y0 * width + x1]
    w10 = flat[y1 * width + x0]
    w11 = flat[y1 * width + x1]
    top = w00 + fx * (w01 - w00)
    bottom = w10 + fx * (w11 - w10)
    out = top + fy * (bottom - top)
    cache = (x0, y0, x1, y1, fx, fy, w00, w01, w10, w11)
    return out, cache


def _bilinear_vjp(g: np.ndarray, out: np.ndarray, v: Sequence[np.ndarray], cache: Any) -> GradTuple:
    grid, x, y = v
    height, width = grid.shape
    x0, y0, x1, y1, fx, fy, w00, w01, w10, w11 = cache
    size = grid.size
    g_grid = np.bincount((y0 * width + x0).reshape(-1), weights=(g * (1 - fx) * (1 - fy)).reshape(-1), minlength=size)
    g_grid += np.bincount((y0 * width + x1).reshape(-1), weights=(g * fx * (1 - fy)).reshape(-1), minlength=size)
    g_grid += np.bincount((y1 * width + x0).reshape(-1), weights=(g * (1 - fx) * fy).reshape(-1), minlength=size)
    g_grid += np.bincount((y1 * width + x1).reshape(-1), weights=(g * fx * fy).reshape(-1), minlength=size)
    inside_x = (x > 0.0) & (x < width - 1.0)
    inside_y = (y > 0.0) & (y < height - 1.0)
    g_x = g * ((1 - fy) * (w01 - w00) + fy * (w11 - w10)) * inside_x
    g_y = g * ((1 - fx) * (w10 - w00) + fx * (w11 - w01)) * inside_y
    return g_grid.reshape(grid.shape), g_x, g_y


def _bilinear_check(grid: np.ndarray, x: np.ndarray, y: np.ndarray) -> Optional[str]:
    if grid.ndim != 2 or grid.size == 0:
        return "grid must be a non-empty 2-D array"
    if x.shape != y.shape:
        return "query coordinate arrays must share shape"
    return None


def _bilinear_branch(v: Sequence[np.ndarray], cache: Any) -> np.ndarray:
    """查询点所在的网格单元，以及是否被截断到边界"""
    grid, x, y = v
    height, width = grid.shape
    x0, y0 = cache[0], cache[1]
    x_side = (x <= 0.0).astype(np.int64) + 2 * (x >= width - 1.0)
    y_side = (y <= 0.0).astype(np.int64) + 2 * (y >= height - 1.0)
    return np.stack([x0, y0, x_side, y_side])


_register("bilinear", _bilinear_forward, _bilinear_vjp, _bilinear_check, arity=3, branch=_bilinear_branch)


# ==================== 记录与反向传播 ====================


def record(primitive: str, inputs: Sequence[Var], **attrs: Any) -> Var:
    """执行一个原语并在当前磁带上记录它

    Args:
        primitive: 原语名称（PRIMITIVES 的键）
        inputs: 输入 Var 列表
        **attrs: 原语的常量属性（axis、index、常数等）

    Returns:
        持有前向值的输出 Var
    """
    prim = PRIMITIVES.get(primitive)
    if prim is None:
        raise ValueError(f"Unknown primitive: {primitive}. Available: {sorted(PRIMITIVES)}")
    inputs = tuple(as_var(x) for x in inputs)
    values = [x.value for x in inputs]
    if prim.arity is not None and len(values) != prim.arity:
        raise ShapeError(primitive, [x.shape for x in values], f"expected {prim.arity} operand(s)")
    if prim.check is not None:
        problem = prim.check(*values, **attrs)
        if problem:
            raise ShapeError(primitive, [x.shape for x in values], problem)
    out_value, cache = prim.forward(*values, **attrs)
    tape = current_tape()
    tracked = tape is not None and any(x.requires_grad for x in inputs)
    out = Var(out_value, requires_grad=tracked)
    if tracked:
        assert tape is not None
        out.tape = tape
        tape.append(Node(prim, inputs, out, attrs, cache))
        if prim.branch is not None:
            tape.note_branch(primitive, prim.branch(values, cache, **attrs))
    return out


def note_branch(label: str, decision: Any) -> None:
    """在当前磁带（若有）上记录一次磁带之外做出的离散选择"""
    tape = current_tape()
    if tape is not None:
        tape.note_branch(label, decision)


def backward(root: Var) -> None:
    """从标量根节点执行一次反向扫描

    Gradients are *added* to ``grad`` so two sweeps over the same tape give twice the
    gradient. Vars not reachable from ``root`` are left untouched.
    """
    if root.value.size != 1:
        raise ValueError(f"backward: root must be scalar-valued, got shape {root.shape}")
    seed = np.ones_like(root.value)
    tape = root.tape
    if tape is None:
        root.accumulate(seed)
        return
    adjoints: Dict[int, np.ndarray] = {id(root): seed}
    leaves: Dict[int, Var] = {}
    visited = 0
    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node.output), None)
        if g is None:
            continue
        visited += 1
        node.output.accumulate(g)
        values = [x.value for x in node.inputs]
        grads = node.primitive.vjp(g, node.output.value, values, node.cache, **node.attrs)
        for var, gi in zip(node.inputs, grads):
            if gi is None or not var.requires_grad:
                continue
            gi = _unbroadcast(np.asarray(gi, dtype=np.float64), var.shape)
            key = id(var)
            if key in adjoints:
                adjoints[key] = adjoints[key] + gi
            else:
                adjoints[key] = gi
            if var.tape is None:
                leaves[key] = var
    for key, g in adjoints.items():
        leaf = leaves.get(key)
        if leaf is not None:
            leaf.accumulate(g)
    debug(f"backward swept {visited}/{len(tape.nodes)} nodes, {len(leaves)} leaves", prefix="AUTODIFF")


# ==================== 函数式接口 ====================


def exp(x: ArrayLike) -> Var:
    return record("exp", [as_var(x)])


def log(x: ArrayLike) -> Var:
    return record("log", [as_var(x)])


def sqrt(x: ArrayLike) -> Var:
    return record("sqrt", [as_var(x)])


def sigmoid(x: ArrayLike) -> Var:
    return record("sigmoid", [as_var(x)])


def softplus(x: ArrayLike, beta: float = 1.0) -> Var:
    return record("softplus", [as_var(x)], beta=float(beta))


def tanh(x: ArrayLike) -> Var:
    return record("tanh", [as_var(x)])


def sin(x: ArrayLike) -> Var:
    return record("sin", [as_var(x)])


def cos(x: ArrayLike) -> Var:
    return record("cos", [as_var(x)])


def absolute(x: ArrayLike) -> Var:
    return record("abs", [as_var(x)])


def power(x: ArrayLike, p: float) -> Var:
    return record("power", [as_var(x)], p=float(p))


def maximum(x: ArrayLike, c: float) -> Var:
    """max(x, c)，c 为常数"""
    return record("maximum", [as_var(x)], c=float(c))


def clip(x: ArrayLike, lo: float, hi: float) -> Var:
    return record("clip", [as_var(x)], lo=float(lo), hi=float(hi))


def minimum_reduce(x: ArrayLike, axis: Optional[int] = None) -> Var:
    return record("min", [as_var(x)], axis=axis)


def matmul(a: ArrayLike, b: ArrayLike) -> Var:
    return record("matmul", [as_var(a), as_var(b)])


def where(cond: np.ndarray, a: ArrayLike, b: ArrayLike) -> Var:
    return record("where", [as_var(a), as_var(b)], cond=np.asarray(cond, dtype=bool))


def gather(x: ArrayLike, index: np.ndarray, axis: int = 0) -> Var:
    return record("gather", [as_var(x)], index=np.asarray(index), axis=axis)


def scatter(x: ArrayLike, index: np.ndarray, size: int, axis: int = 0) -> Var:
    return record("scatter", [as_var(x)], index=np.asarray(index), size=int(size), axis=axis)


def broadcast(x: ArrayLike, shape: Tuple[int, ...]) -> Var:
    return record("broadcast", [as_var(x)], shape=tuple(shape))


def concat(parts: Sequence[ArrayLike], axis: int = 0) -> Var:
    return record("concat", [as_var(p) for p in parts], axis=axis)


def stack(parts: Sequence[ArrayLike], axis: int = 0) -> Var:
    return record("stack", [as_var(p) for p in parts], axis=axis)


def bilinear(grid: ArrayLike, x: ArrayLike, y: ArrayLike) -> Var:
    return record("bilinear", [as_var(grid), as_var(x), as_var(y)])


# ==================== Adam 优化器 ====================


@dataclass
class AdamState:
    """Adam 一阶/二阶矩缓冲区，按参数名索引"""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def zero_grad(params: Sequence[Var]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(
    params: Sequence[Var],
    state: AdamState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """原地执行一次带偏差修正的 Adam 更新

    The whole step is aborted, with no parameter touched, if any gradient is
    non-finite.
    """
    for p in params:
        if p.name is None:
            raise ValueError("adam_step: every parameter needs a name")
        m = state.m.get(p.name)
        if m is not None and m.shape != p.value.shape:
            raise ShapeError("adam_step", [m.shape, p.value.shape], f"moment buffer of '{p.name}' does not match")
        if p._grad is not None and not np.all(np.isfinite(p._grad)):
            raise OptimizerError(f"non-finite gradient in parameter '{p.name}'; Adam step aborted")
    state.step += 1
    beta1, beta2 = betas
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for p in params:
        assert p.name is not None
        g = p._grad if p._grad is not None else np.zeros_like(p.value)
        m = state.m.get(p.name, np.zeros_like(p.value))
        v = state.v.get(p.name, np.zeros_like(p.value))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[p.name] = m
        state.v[p.name] = v
        p.value -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
