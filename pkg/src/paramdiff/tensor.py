"""Dense float64 tensors with a tape-based reverse-mode differentiation kernel.

Values are plain row-major ``numpy.ndarray`` objects of dtype float64.  A
:class:`Tape` records each primitive op together with its backward rule; the
tape is rebuilt for every batch since the model topology can change between
batches.  Ops are deliberately coarse (a whole linear layer, a whole
multi-head attention core) to keep the interpreter overhead per step small.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64
MASK_VALUE = -1e9


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigError(ValueError):
    """Raised for invalid op or model configuration."""


class Var:
    """A value on (or off) the tape.  ``grad`` is filled by :meth:`Tape.backward`."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records ops in execution order; ``backward`` replays them in reverse.

    With ``record=False`` the ops only compute forward values, which is what
    evaluation and greedy decoding use.
    """

    def __init__(self, record=True, rng=None):
        self.record = record
        self.nodes = []
        self.rng = rng
        self.leaves = {}

    def __len__(self):
        return len(self.nodes)

    def _out(self, value, inputs, backward):
        needs = self.record and any(v.requires_grad for v in inputs)
        out = Var(value, requires_grad=needs)
        if needs:
            self.nodes.append((inputs, out, backward))
        return out

    def backward(self, loss, seed=1.0):
        if loss.value.size != 1:
            raise ShapeError("backward() needs a scalar loss")
        loss.grad = np.full(loss.value.shape, seed, dtype=DTYPE)
        for inputs, out, rule in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = rule(out.grad)
            for v, g in zip(inputs, grads):
                if g is None or not v.requires_grad:
                    continue
                if v.grad is None:
                    v.grad = g
                else:
                    v.grad = v.grad + g
        # a second backward over the same tape would double count
        self.nodes = []

    # ------------------------------------------------------------------ ops

    def matmul(self, a, b):
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")

        def rule(g):
            return g @ bv.T, av.T @ g

        return self._out(av @ bv, (a, b), rule)

    def linear(self, x, weight, bias=None):
        """``x @ weight + bias`` over the last axis of ``x``."""
        xv, wv = x.value, weight.value
        if xv.shape[-1] != wv.shape[0]:
            raise ShapeError(f"linear: input dim {xv.shape[-1]} != weight rows {wv.shape[0]}")
        lead = xv.shape[:-1]
        x2 = xv.reshape(-1, wv.shape[0])
        y = x2 @ wv
        if bias is not None:
            y += bias.value

        def rule(g):
            g2 = g.reshape(-1, wv.shape[1])
            gx = (g2 @ wv.T).reshape(xv.shape)
            gw = x2.T @ g2
            if bias is None:
                return gx, gw
            return gx, gw, _col_sums(g2)

        inputs = (x, weight) if bias is None else (x, weight, bias)
        return self._out(y.reshape(lead + (wv.shape[1],)), inputs, rule)

    def packed_linear(self, x, weights, biases):
        """``x @ [W1 W2 ...] + [b1 b2 ...]``: several projections of one input at once."""
        xv = x.value
        w = np.concatenate([wt.value for wt in weights], axis=1)
        b = np.concatenate([bt.value for bt in biases])
        d_in = xv.shape[-1]
        if d_in != w.shape[0]:
            raise ShapeError(f"packed_linear: input dim {d_in} != weight rows {w.shape[0]}")
        x2 = xv.reshape(-1, d_in)
        y = x2 @ w
        y += b
        ends = np.cumsum([wt.value.shape[1] for wt in weights]).tolist()
        spans = list(zip([0] + ends[:-1], ends))

        def rule(g):
            g2 = g.reshape(-1, w.shape[1])
            gx = (g2 @ w.T).reshape(xv.shape)
            gw = x2.T @ g2
            gb = _col_sums(g2)
            return (gx, *(gw[:, a:b] for a, b in spans), *(gb[a:b] for a, b in spans))

        return self._out(y.reshape(xv.shape[:-1] + (w.shape[1],)), (x, *weights, *biases), rule)

    def add(self, a, b):
        if a.value.shape != b.value.shape:
            raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")

        def rule(g):
            return g, g

        return self._out(a.value + b.value, (a, b), rule)

    def scale(self, x, c):
        def rule(g):
            return (g * c,)

        return self._out(x.value * c, (x,), rule)

    def relu(self, x):
        xv = x.value
        mask = xv > 0

        def rule(g):
            return (g * mask,)

        return self._out(xv * mask, (x,), rule)

    def dropout(self, x, p):
        if not self.record or p <= 0.0:
            return x
        if self.rng is None:
            raise ConfigError("dropout needs a tape rng")
        keep = (self.rng.random(x.value.shape) >= p) / (1.0 - p)

        def rule(g):
            return (g * keep,)

        return self._out(x.value * keep, (x,), rule)

    def layer_norm(self, x, gain, bias, eps=1e-5):
        if eps <= 0:
            raise ConfigError("layer_norm eps must be positive")
        xv = x.value
        d = xv.shape[-1]
        if gain.value.shape != (d,) or bias.value.shape != (d,):
            raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
        inv_d = 1.0 / d
        ones = np.full((d, 1), inv_d)
        xc = xv - xv @ ones
        rstd = 1.0 / np.sqrt((xc * xc) @ ones + eps)
        xhat = xc * rstd
        gv = gain.value

        def rule(g):
            lead = g.reshape(-1, d)
            gxhat = g * gv
            gx = rstd * (gxhat - gxhat @ ones - xhat * ((gxhat * xhat) @ ones))
            return gx, _col_sums(lead * xhat.reshape(-1, d)), _col_sums(lead)

        return self._out(xhat * gv + bias.value, (x, gain, bias), rule)

    def embedding(self, table, ids, scale=1.0, add=None):
        """Row lookup ``table[ids] * scale (+ add)``; ``add`` is a constant array."""
        tv = table.value
        ids = np.asarray(ids)
        out = tv[ids] * scale
        if add is not None:
            out = out + add

        def rule(g):
            gt = np.zeros_like(tv)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, tv.shape[1]) * scale)
            return (gt,)

        return self._out(out, (table,), rule)

    def attention(self, q, k, v, heads, causal=False, key_padding=None, dropout=0.0):
        """Scaled dot-product multi-head attention on already-projected inputs.

        ``q`` is (B, Tq, d); ``k`` and ``v`` are (B, Tk, d).  ``key_padding`` is an
        optional boolean (B, Tk) array, True where the key is padding.
        """
        if k.value.shape != v.value.shape or k.value.shape[0] != q.value.shape[0] \
                or k.value.shape[2] != q.value.shape[2]:
            raise ShapeError("attention: k and v must be (B, Tk, d) matching q")
        out, core_rule = _attention_core(q.value, k.value, v.value, heads, causal,
                                         key_padding, self._keep_fn(dropout))
        return self._out(out, (q, k, v), core_rule)

    def packed_attention(self, q, kv=None, heads=1, causal=False, key_padding=None, dropout=0.0):
        """Attention on packed projections.

        With ``kv=None``, ``q`` holds concatenated (query, key, value) along the
        last axis (self-attention); otherwise ``kv`` holds (key, value) for
        cross-attention over another sequence.
        """
        if kv is None:
            d = q.value.shape[-1] // 3
            qv, kv_, vv = q.value[..., :d], q.value[..., d:2 * d], q.value[..., 2 * d:]
        else:
            d = q.value.shape[-1]
            qv, kv_, vv = q.value, kv.value[..., :d], kv.value[..., d:]
        out, core_rule = _attention_core(qv, kv_, vv, heads, causal, key_padding,
                                         self._keep_fn(dropout))

        if kv is None:
            def rule(g):
                return (np.concatenate(core_rule(g), axis=-1),)
            return self._out(out, (q,), rule)

        def rule(g):
            gq, gk, gv = core_rule(g)
            return gq, np.concatenate((gk, gv), axis=-1)
        return self._out(out, (q, kv), rule)

    def _keep_fn(self, p):
        if p <= 0.0 or not self.record:
            return None
        if self.rng is None:
            raise ConfigError("dropout needs a tape rng")
        return lambda shape: (self.rng.random(shape) >= p) / (1.0 - p)

    def softmax_cross_entropy(self, logits, targets, label_smoothing=0.0, ignore_index=None):
        """Mean token cross-entropy of ``logits`` (..., V) against integer ``targets``.

        Positions whose target equals ``ignore_index`` do not count.
        """
        lv = logits.value
        V = lv.shape[-1]
        l2 = lv.reshape(-1, V)
        t = np.asarray(targets).reshape(-1)
        if t.shape[0] != l2.shape[0]:
            raise ShapeError("softmax_cross_entropy: one target per logit row required")
        if not 0.0 <= label_smoothing < 1.0:
            raise ConfigError("label smoothing must lie in [0, 1)")
        keep = np.ones(t.shape, dtype=bool) if ignore_index is None else t != ignore_index
        if np.any((t[keep] < 0) | (t[keep] >= V)):
            raise IndexError(f"target id out of range for vocabulary of {V}")
        n = int(keep.sum())
        if n == 0:
            raise ShapeError("softmax_cross_entropy: no non-ignored targets")
        tt = np.where(keep, t, 0)
        z = l2 - l2.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - lse
        rows = np.arange(len(tt))
        nll = -logp[rows, tt]
        if label_smoothing > 0.0:
            nll = (1.0 - label_smoothing) * nll - label_smoothing * logp.mean(axis=1)
        loss = np.array((nll * keep).sum() / n)

        def rule(g):
            p = np.exp(logp)
            target = np.zeros_like(p)
            target[rows, tt] = 1.0 - label_smoothing
            target += label_smoothing / V
            gl = (p - target) * (keep[:, None] * (g / n))
            return (gl.reshape(lv.shape),)

        return self._out(loss, (logits,), rule)

    def sum(self, *xs):
        """Sum of scalar vars."""
        total = np.array(sum(float(x.value) for x in xs))

        def rule(g):
            return tuple(g for _ in xs)

        return self._out(total, tuple(xs), rule)


def _attention_core(qv, kv, vv, heads, causal, key_padding, keep_fn):
    B, Tq, d = qv.shape
    Tk = kv.shape[1]
    if heads < 1 or d % heads:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    sc = 1.0 / np.sqrt(dh)

    def split(a, T):
        return a.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(qv, Tq), split(kv, Tk), split(vv, Tk)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * sc
    if causal:
        if Tq != Tk:
            raise ShapeError("causal attention needs Tq == Tk")
        scores += _causal_bias(Tq)
    if key_padding is not None:
        scores += padding_bias(key_padding)[:, None, None, :]
    w = _softmax_last(scores)
    keep = None if keep_fn is None else keep_fn(w.shape)
    wd = w if keep is None else w * keep
    out = (wd @ vh).transpose(0, 2, 1, 3).reshape(B, Tq, d)

    def rule(g):
        gh = split(g, Tq)
        gv = (wd.transpose(0, 1, 3, 2) @ gh).transpose(0, 2, 1, 3).reshape(B, Tk, d)
        gw = gh @ vh.transpose(0, 1, 3, 2)
        if keep is not None:
            gw *= keep
        gs = w * (gw - _row_sums(gw * w))
        gs *= sc
        gq = (gs @ kh).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        gk = (gs.transpose(0, 1, 3, 2) @ qh).transpose(0, 2, 1, 3).reshape(B, Tk, d)
        return gq, gk, gv

    return out, rule


def padding_bias(key_padding):
    """Additive attention bias for a boolean (B, Tk) padding mask; float input passes through."""
    if key_padding.dtype == np.bool_:
        return np.where(key_padding, MASK_VALUE, 0.0)
    return key_padding


_CAUSAL = {}


def _causal_bias(T):
    bias = _CAUSAL.get(T)
    if bias is None:
        bias = _CAUSAL[T] = np.triu(np.full((T, T), MASK_VALUE), 1)
    return bias


def _col_sums(a2):
    return np.ones(a2.shape[0]) @ a2


def _row_sums(a):
    # matmul against ones beats .sum(axis=-1) on short rows by an order of magnitude
    return a @ np.ones((a.shape[-1], 1))


def _softmax_last(scores):
    """Softmax over the last axis; ``scores`` is shifted in place.

    Shifting by the global maximum instead of each row's maximum is much cheaper
    on short rows.  Rows that underflow under the global shift are redone with
    their own maximum.
    """
    scores -= scores.max()
    w = np.exp(scores)
    total = _row_sums(w)
    if total.min() < 1e-200:
        w = np.exp(scores - scores.max(axis=-1, keepdims=True))
        total = _row_sums(w)
    w *= 1.0 / total
    return w


def sinusoidal_positions(length, d):
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def central_difference(f, x, step=1e-5):
    """Numerical gradient of scalar ``f`` at float array ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=DTYPE).ravel()
    b = np.asarray(b, dtype=DTYPE).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
