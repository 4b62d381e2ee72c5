"""Certified bi-Lipschitz diffeomorphism with analytic gradients.

The map alternates exactly-orthogonal linear blocks with contractive residual
blocks and ends with a fixed output scale, a goal-centering shift, and a
ball-rescale factor:

    z = (1/r) * (s * B(x) - shift),        B = R_K o Q_K o ... o R_1 o Q_1

* Q_k: orthogonal matrix through the Cayley map of a skew-symmetric matrix,
  Lipschitz exactly 1 in both directions.
* R_k(x) = x + res_k(x): residual block whose two-layer tanh perceptron is
  smoothly rescaled so that Lip(res_k) < tau_k < 1 for every parameter value.
  The rescale uses the exact spectral norms of the two weight matrices
  (largest eigenvalue of the small-side Gram matrix), so the certificate is
  an upper bound that is tight up to activation slope. Hence each R_k is a
  diffeomorphism with 1 - tau_k <= Lip <= 1 + tau_k and Banach fixed-point
  inversion.

The certified bounds

    mu = (s/r) * prod(1 - tau_k),    nu = (s/r) * prod(1 + tau_k)

therefore hold by construction for all parameter values. tau_k are fixed
hyperparameters, never trained, so the distortion nu/mu is known a priori.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

MODEL_FORMAT_VERSION = 1


def _top_gram_eig(W: np.ndarray):
    """Largest eigenvalue (= sigma_max^2) and eigenvector of W^T W.

    W has shape (h, n) with small n, so the Gram matrix is n x n and the
    spectral norm is exact, not an estimate. At W = 0 the eigenvalue gradient
    2 W v v^T vanishes, so the rescale stays differentiable there.
    """
    gram = W.T @ W
    vals, vecs = np.linalg.eigh(gram)
    return float(vals[-1]), vecs[:, -1]


class NonConvergence(RuntimeError):
    """Fixed-point inversion failed to reach tolerance within max_iter."""

    def __init__(self, block_index: int, residual: float, row: int, max_iter: int):
        self.block_index = block_index
        self.residual = residual
        self.row = row
        self.max_iter = max_iter
        super().__init__(
            f"residual block {block_index}: fixed-point residual {residual:.3e} "
            f"after {max_iter} iterations (worst sample index {row})"
        )


@dataclass(frozen=True)
class CertBounds:
    """Certified lower/upper Lipschitz bounds of the map."""

    mu: float
    nu: float

    def __post_init__(self):
        if not (0 < self.mu <= self.nu):
            raise ValueError(f"invalid bounds mu={self.mu}, nu={self.nu}")

    @property
    def distortion(self) -> float:
        return self.nu / self.mu


class BiLipMap:
    """Bi-Lipschitz network with certified bounds and exact inversion.

    Parameters live in one flat float64 vector; per-block weights are views
    into it. Evaluation is pure and batched: every public method accepts a
    single point (n,) or a batch (B, n).
    """

    def __init__(self, n=2, depth=4, hidden=64, tau=0.5, out_scale=1.0, seed=0):
        if n < 1 or depth < 1 or hidden < 1:
            raise ValueError("n, depth, hidden must be positive")
        taus = np.full(depth, float(tau)) if np.ndim(tau) == 0 else np.asarray(tau, dtype=float)
        if taus.shape != (depth,) or np.any((taus <= 0) | (taus >= 1)):
            raise ValueError("tau values must lie in (0, 1), one per block pair")
        if out_scale <= 0:
            raise ValueError("out_scale must be positive")
        self.n = int(n)
        self.depth = int(depth)
        self.hidden = int(hidden)
        self.taus = taus
        self.out_scale = float(out_scale)
        self.ball_scale = 1.0
        self._goal: np.ndarray | None = None
        self._shift_raw: np.ndarray | None = None
        self._iu = np.triu_indices(self.n, k=1)
        self._n_skew = len(self._iu[0])

        sizes = []
        for _ in range(depth):
            sizes += [self._n_skew, hidden * n, hidden, n * hidden, n]
        self._theta = np.zeros(sum(sizes))
        self._views = []
        off = 0
        for k in range(depth):
            skew = self._theta[off : off + self._n_skew]
            off += self._n_skew
            W1 = self._theta[off : off + hidden * n].reshape(hidden, n)
            off += hidden * n
            b1 = self._theta[off : off + hidden]
            off += hidden
            W2 = self._theta[off : off + n * hidden].reshape(n, hidden)
            off += n * hidden
            b2 = self._theta[off : off + n]
            off += n
            self._views.append({"skew": skew, "W1": W1, "b1": b1, "W2": W2, "b2": b2})

        # break symmetry: random first layers, zero second layers -> identity map
        rng = np.random.default_rng(seed)
        for k in range(depth):
            self._views[k]["W1"][:] = rng.normal(0.0, 1.0 / np.sqrt(n), (hidden, n))

    def set_feature_anchors(self, points, seed=0) -> "BiLipMap":
        """Center each hidden unit's active region on a data point.

        Sets b1 = -W1 @ anchor per unit, so tanh features are unsaturated
        inside the region covered by `points` instead of dying far from the
        coordinate origin. Leaves the map's identity initialization intact
        (second layers stay zero). Call before training.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rng = np.random.default_rng(seed)
        for k in range(self.depth):
            v = self._views[k]
            anchors = pts[rng.integers(0, len(pts), self.hidden)]
            v["b1"][:] = -np.einsum("hn,hn->h", v["W1"], anchors)
        return self

    # -- parameters ---------------------------------------------------------

    @property
    def param_count(self) -> int:
        return self._theta.size

    def param_vector(self) -> np.ndarray:
        return self._theta.copy()

    def set_param_vector(self, theta: np.ndarray) -> "BiLipMap":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self._theta.shape:
            raise ValueError("parameter vector has wrong length")
        self._theta[:] = theta
        return self

    def _scale_chain_grads(self, k, aux, cbar, g):
        """Accumulate d(cbar * c)/dW through the spectral rescale."""
        v = self._views[k]
        dc_dP = -0.5 * self.taus[k] * (1.0 + aux["P"]) ** -1.5
        g["W1"] += (cbar * dc_dP * aux["lam2"] * 2.0) * np.outer(v["W1"] @ aux["v1"], aux["v1"])
        g["W2"] += (cbar * dc_dP * aux["lam1"] * 2.0) * np.outer(aux["v2"], v["W2"].T @ aux["v2"])

    def set_goal_center(self, goal) -> "BiLipMap":
        """Center the map so that forward(goal) = 0."""
        self._goal = np.asarray(goal, dtype=float).reshape(self.n)
        self._shift_raw = None
        return self

    def set_ball_scale(self, r: float) -> "BiLipMap":
        """Set the post-calibration rescale; divides the output (and mu, nu) by r."""
        if r <= 0:
            raise ValueError("ball_scale must be positive")
        self.ball_scale = float(r)
        return self

    @property
    def goal(self) -> np.ndarray | None:
        return self._goal

    def cert_bounds(self) -> CertBounds:
        f = self.out_scale / self.ball_scale
        return CertBounds(
            mu=f * float(np.prod(1.0 - self.taus)),
            nu=f * float(np.prod(1.0 + self.taus)),
        )

    # -- block stack ----------------------------------------------------------

    def _orth_matrices(self):
        """All Cayley matrices Q_k = (I - S_k)(I + S_k)^-1 plus (I + S_k)^-1."""
        K, n = self.depth, self.n
        S = np.zeros((K, n, n))
        for k in range(K):
            S[k][self._iu] = self._views[k]["skew"]
        S -= np.transpose(S, (0, 2, 1))
        eye = np.eye(n)
        Ainv = np.linalg.inv(eye + S)
        Q = (eye - S) @ Ainv
        return Q, Ainv

    def _res_scale(self, k):
        """Certified rescale c with Lip(c * W2 tanh(W1 . + b1)) < tau_k.

        Uses squared spectral norms lam = sigma_max^2 from the small n x n
        Gram matrices; c = tau / sqrt(1 + lam1*lam2) gives
        Lip <= c * sigma1 * sigma2 = tau * q / sqrt(1 + q^2) < tau.
        Returns (c, aux) with the eigen data needed for the backward pass.
        """
        v = self._views[k]
        lam1, v1 = _top_gram_eig(v["W1"])
        lam2, v2 = _top_gram_eig(v["W2"].T)
        P = lam1 * lam2
        c = self.taus[k] / np.sqrt(1.0 + P)
        return c, {"lam1": lam1, "lam2": lam2, "v1": v1, "v2": v2, "P": P}

    def _blocks_apply(self, X: np.ndarray, want_cache=False):
        """Run the raw block stack (no scale/shift); X is (B, n)."""
        Q, Ainv = self._orth_matrices()
        cache = (
            {"Q": Q, "Ainv": Ainv, "h_orth": [], "h_res": [], "t": [], "u": [],
             "c": [], "aux": []}
            if want_cache
            else None
        )
        h = X
        for k in range(self.depth):
            v = self._views[k]
            if want_cache:
                cache["h_orth"].append(h)
            h = h @ Q[k].T
            if want_cache:
                cache["h_res"].append(h)
            t = np.tanh(h @ v["W1"].T + v["b1"])
            c, aux = self._res_scale(k)
            u = t @ v["W2"].T
            h = h + c * u + v["b2"]
            if want_cache:
                cache["t"].append(t)
                cache["u"].append(u)
                cache["c"].append(c)
                cache["aux"].append(aux)
        return (h, cache) if want_cache else h

    def _shift_vector(self) -> np.ndarray:
        """Raw shift subtracted before the 1/r rescale."""
        if self._goal is not None:
            return self.out_scale * self._blocks_apply(self._goal[None, :])[0]
        if self._shift_raw is not None:
            return self._shift_raw
        return np.zeros(self.n)

    # -- evaluation -----------------------------------------------------------

    def forward(self, x) -> np.ndarray:
        """Evaluate z = (1/r)(s * B(x) - shift)."""
        X = np.asarray(x, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if self._goal is not None:
            Y = self._blocks_apply(np.vstack([X, self._goal[None, :]]))
            Z = (self.out_scale / self.ball_scale) * (Y[:-1] - Y[-1])
        else:
            shift = self._shift_raw if self._shift_raw is not None else 0.0
            Z = (self.out_scale * self._blocks_apply(X) - shift) / self.ball_scale
        return Z[0] if single else Z

    def jacobian(self, x) -> np.ndarray:
        """Exact Jacobian G(x) as the chain-rule product of block Jacobians."""
        X = np.asarray(x, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        _, cache = self._blocks_apply(X, want_cache=True)
        G = self._jacobian_from_cache(cache, len(X))
        return G[0] if single else G

    def _jacobian_from_cache(self, cache, batch):
        G = np.broadcast_to(np.eye(self.n), (batch, self.n, self.n)).copy()
        for k in range(self.depth):
            v = self._views[k]
            G = cache["Q"][k] @ G
            d = 1.0 - cache["t"][k] ** 2
            Jres = np.eye(self.n) + cache["c"][k] * np.einsum(
                "ih,bh,hj->bij", v["W2"], d, v["W1"]
            )
            G = Jres @ G
        return (self.out_scale / self.ball_scale) * G

    def inverse(self, z, tol: float = 1e-9, max_iter: int = 200, return_info=False):
        """Invert the map: orthogonal blocks by transpose, residual blocks by
        Banach fixed-point iteration x <- y - res(x) (contraction rate tau_k).

        Guarantees |forward(x) - z| <= tol on success; raises NonConvergence
        with the offending block and worst sample index otherwise.
        """
        if tol <= 0:
            raise ValueError("tol must be positive")
        if max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        Z = np.asarray(z, dtype=float)
        single = Z.ndim == 1
        Z = np.atleast_2d(Z)

        # budget the per-block stopping rule so accumulated error, amplified
        # through the remaining inverse blocks and the forward map, stays < tol
        cb = self.cert_bounds()
        inv_amp = float(np.prod(1.0 / (1.0 - self.taus)))
        worst_step = float(np.max(self.taus / (1.0 - self.taus)))
        block_tol = tol / (cb.nu * self.depth * inv_amp * max(1.0, worst_step) * 4.0)

        Q, _ = self._orth_matrices()
        y = (self.ball_scale * Z + self._shift_vector()) / self.out_scale
        # info lists follow inversion order: outermost residual block first
        info = {"iterations": [], "residual_history": [], "block_order": list(reversed(range(self.depth)))}
        for k in reversed(range(self.depth)):
            v = self._views[k]
            c, _ = self._res_scale(k)
            x = y.copy()
            history = []
            for it in range(max_iter):
                xn = y - c * (np.tanh(x @ v["W1"].T + v["b1"]) @ v["W2"].T) - v["b2"]
                res = np.linalg.norm(xn - x, axis=1)
                worst = float(res.max())
                history.append(worst)
                x = xn
                if worst <= block_tol:
                    break
            else:
                raise NonConvergence(k, worst, int(np.argmax(res)), max_iter)
            info["iterations"].append(it + 1)
            info["residual_history"].append(history)
            y = x @ Q[k]
        out = y[0] if single else y
        return (out, info) if return_info else out

    # -- gradients ------------------------------------------------------------

    def param_gradient(self, x, cotangent) -> np.ndarray:
        """Exact vector-Jacobian product d<cotangent, forward(x)>/d(theta).

        Sums over the batch; includes the dependence of the goal-centering
        shift on the parameters when a goal is set.
        """
        X = np.atleast_2d(np.asarray(x, dtype=float))
        C = np.atleast_2d(np.asarray(cotangent, dtype=float)) * (self.out_scale / self.ball_scale)
        if X.shape != C.shape:
            raise ValueError("cotangent shape must match x")
        if self._goal is not None:
            X = np.vstack([X, self._goal[None, :]])
            C = np.vstack([C, -C.sum(axis=0, keepdims=True)])
        _, cache = self._blocks_apply(X, want_cache=True)
        grad = np.zeros_like(self._theta)
        self._blocks_vjp(cache, C, grad)
        return grad

    def _grad_views(self, grad):
        views = []
        off = 0
        for k in range(self.depth):
            skew = grad[off : off + self._n_skew]
            off += self._n_skew
            W1 = grad[off : off + self.hidden * self.n].reshape(self.hidden, self.n)
            off += self.hidden * self.n
            b1 = grad[off : off + self.hidden]
            off += self.hidden
            W2 = grad[off : off + self.n * self.hidden].reshape(self.n, self.hidden)
            off += self.n * self.hidden
            b2 = grad[off : off + self.n]
            off += self.n
            views.append({"skew": skew, "W1": W1, "b1": b1, "W2": W2, "b2": b2})
        return views

    def _res_vjp(self, k, cache, ybar, g):
        """VJP through residual block k; returns cotangent on the block input."""
        v = self._views[k]
        t, u, c = cache["t"][k], cache["u"][k], cache["c"][k]
        h_in = cache["h_res"][k]
        cbar = float(np.sum(ybar * u))
        pbar = (ybar @ v["W2"]) * c * (1.0 - t * t)
        g["W2"] += c * (ybar.T @ t)
        g["b2"] += ybar.sum(axis=0)
        g["W1"] += pbar.T @ h_in
        g["b1"] += pbar.sum(axis=0)
        self._scale_chain_grads(k, cache["aux"][k], cbar, g)
        return ybar + pbar @ v["W1"]

    def _orth_vjp(self, k, cache, ybar, g):
        """VJP through orthogonal block k; returns cotangent on the block input."""
        Q, Ainv = cache["Q"][k], cache["Ainv"][k]
        Qbar = ybar.T @ cache["h_orth"][k]
        Sbar = -2.0 * Ainv.T @ Qbar @ Ainv.T
        g["skew"] += (Sbar - Sbar.T)[self._iu]
        return ybar @ Q

    def _blocks_vjp(self, cache, ybar, grad):
        g = self._grad_views(grad)
        for k in reversed(range(self.depth)):
            ybar = self._res_vjp(k, cache, ybar, g[k])
            ybar = self._orth_vjp(k, cache, ybar, g[k])
        return ybar

    def jacobian_param_vjp(self, x, Lambda) -> np.ndarray:
        """Exact VJP of theta -> G(x) with matrix cotangent Lambda (per sample).

        Needed for losses that differentiate through the field's linear solve.
        x is (B, n), Lambda is (B, n, n); returns the summed parameter gradient.
        """
        X = np.atleast_2d(np.asarray(x, dtype=float))
        Lam = np.asarray(Lambda, dtype=float).reshape(len(X), self.n, self.n)
        _, cache = self._blocks_apply(X, want_cache=True)
        B = len(X)
        eye = np.eye(self.n)

        # per-block Jacobians, in application order [Q_1, R_1, Q_2, R_2, ...]
        Js = []
        for k in range(self.depth):
            v = self._views[k]
            Js.append(np.broadcast_to(cache["Q"][k], (B, self.n, self.n)))
            d = 1.0 - cache["t"][k] ** 2
            Js.append(eye + cache["c"][k] * np.einsum("ih,bh,hj->bij", v["W2"], d, v["W1"]))

        L = len(Js)
        prefix = [np.broadcast_to(eye, (B, self.n, self.n))]
        for J in Js[:-1]:
            prefix.append(J @ prefix[-1])
        suffix = [None] * L
        acc = np.broadcast_to(eye, (B, self.n, self.n))
        for idx in reversed(range(L)):
            suffix[idx] = acc
            acc = acc @ Js[idx]

        scale = self.out_scale / self.ball_scale
        grad = np.zeros_like(self._theta)
        g = self._grad_views(grad)
        hbar = [np.zeros((B, self.n)) for _ in range(L)]
        for idx in range(L):
            Jbar = scale * np.einsum("bji,bjk,blk->bil", suffix[idx], Lam, prefix[idx])
            k, is_res = idx // 2, idx % 2 == 1
            v = self._views[k]
            if not is_res:
                Qbar = Jbar.sum(axis=0)
                Sbar = -2.0 * cache["Ainv"][k].T @ Qbar @ cache["Ainv"][k].T
                g[k]["skew"] += (Sbar - Sbar.T)[self._iu]
            else:
                t, c = cache["t"][k], cache["c"][k]
                d = 1.0 - t * t
                cbar = float(np.einsum("bij,im,bm,mj->", Jbar, v["W2"], d, v["W1"]))
                g[k]["W2"] += c * np.einsum("bij,mj,bm->im", Jbar, v["W1"], d)
                g[k]["W1"] += c * np.einsum("im,bm,bij->mj", v["W2"], d, Jbar)
                dbar = c * np.einsum("im,bij,mj->bm", v["W2"], Jbar, v["W1"])
                pbar = dbar * (-2.0 * t * d)
                g[k]["W1"] += pbar.T @ cache["h_res"][k]
                g[k]["b1"] += pbar.sum(axis=0)
                hbar[idx] += pbar @ v["W1"]
                self._scale_chain_grads(k, cache["aux"][k], cbar, g[k])

        # propagate the block-input cotangents back through earlier blocks
        carry = np.zeros((B, self.n))
        for idx in reversed(range(L)):
            k, is_res = idx // 2, idx % 2 == 1
            if is_res:
                carry = self._res_vjp(k, cache, carry, g[k])
            else:
                carry = self._orth_vjp(k, cache, carry, g[k])
            carry += hbar[idx]
        return grad

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        blocks = []
        for k in range(self.depth):
            v = self._views[k]
            blocks.append({"type": "orth", "skew": v["skew"].tolist()})
            blocks.append(
                {
                    "type": "res",
                    "tau": float(self.taus[k]),
                    "W1": v["W1"].tolist(),
                    "b1": v["b1"].tolist(),
                    "W2": v["W2"].tolist(),
                    "b2": v["b2"].tolist(),
                }
            )
        cb = self.cert_bounds()
        return {
            "version": MODEL_FORMAT_VERSION,
            "n": self.n,
            "blocks": blocks,
            "out_scale": self.out_scale,
            "shift": self._shift_vector().tolist(),
            "ball_scale": self.ball_scale,
            "goal": None if self._goal is None else self._goal.tolist(),
            "mu": cb.mu,
            "nu": cb.nu,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BiLipMap":
        blocks = d["blocks"]
        res_blocks = [b for b in blocks if b["type"] == "res"]
        orth_blocks = [b for b in blocks if b["type"] == "orth"]
        if len(res_blocks) != len(orth_blocks) or not res_blocks:
            raise ValueError("model must alternate orth and res blocks")
        n = int(d["n"])
        hidden = len(res_blocks[0]["b1"])
        taus = [b["tau"] for b in res_blocks]
        m = cls(n=n, depth=len(res_blocks), hidden=hidden, tau=taus, out_scale=d["out_scale"])
        for k, (ob, rb) in enumerate(zip(orth_blocks, res_blocks)):
            v = m._views[k]
            v["skew"][:] = ob["skew"]
            v["W1"][:] = rb["W1"]
            v["b1"][:] = rb["b1"]
            v["W2"][:] = rb["W2"]
            v["b2"][:] = rb["b2"]
        m.ball_scale = float(d.get("ball_scale", 1.0))
        if d.get("goal") is not None:
            m.set_goal_center(np.asarray(d["goal"], dtype=float))
        elif d.get("shift") is not None:
            m._shift_raw = np.asarray(d["shift"], dtype=float)
        cb = m.cert_bounds()
        for name, stored in (("mu", d.get("mu")), ("nu", d.get("nu"))):
            if stored is not None and not np.isclose(stored, getattr(cb, name), rtol=1e-9):
                warnings.warn(
                    f"stored {name}={stored} disagrees with recomputed {getattr(cb, name)}; "
                    "model file may be corrupted"
                )
        return m


@dataclass
class PlannerModel:
    """Everything needed to evaluate the planner: map, rate lambda, level c."""

    map: BiLipMap
    lam: float = 1.0
    level_c: float | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = self.map.to_dict()
        d["lambda"] = self.lam
        d["level_c"] = self.level_c
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerModel":
        return cls(
            map=BiLipMap.from_dict(d),
            lam=float(d.get("lambda", 1.0)),
            level_c=d.get("level_c"),
            meta=d.get("meta", {}),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "PlannerModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
