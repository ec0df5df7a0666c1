"""Finite-difference oracle shared by the gradient tests."""
import numpy as np

from aemim import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` (array -> float) at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error; 0 when both are exactly zero."""
    num = np.linalg.norm(np.asarray(a) - np.asarray(b))
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(num / den)


def check_op(fn, inputs: list[np.ndarray], h: float = 1e-6, weights=None) -> float:
    """Max relative error between autodiff and FD for ``sum(fn(*inputs) * weights)``.

    A fixed random weighting makes the scalar depend on every output element.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    out0 = fn(*[T.Tensor(x) for x in inputs])
    if weights is None:
        weights = np.random.default_rng(99).normal(size=out0.shape)

    def scalar(*arrs):
        return T.sum(T.mul(fn(*arrs), weights))

    leaves = [T.Tensor(x, requires_grad=True) for x in inputs]
    grads = T.grad(scalar(*leaves), {str(i): t for i, t in enumerate(leaves)})
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = [T.Tensor(xi if j == i else inputs[j]) for j in range(len(inputs))]
            return scalar(*args).item()
        worst = max(worst, rel_err(grads[str(i)], numeric_grad(f, x, h)))
    return worst


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _idx(rng, b, n, v):
    return np.stack([np.sort(rng.permutation(n)[:v]) for _ in range(b)])


def primitive_cases(rng):
    """``name -> (fn, inputs)`` for one random instance of every differentiable primitive."""
    b, n, d = rng.integers(1, 3), rng.integers(2, 5), rng.integers(3, 6)
    x = rng.normal(size=(b, n, d))
    gamma, beta = rng.normal(size=d), rng.normal(size=d)
    idx = _idx(rng, b, n, rng.integers(1, n + 1))
    labels = rng.integers(0, d, size=n)
    return {
        "add": (T.add, [x, rng.normal(size=d)]),
        "sub": (T.sub, [x, rng.normal(size=(n, d))]),
        "mul": (T.mul, [x, rng.normal(size=(1, n, d))]),
        "scale": (lambda a: T.scale(a, -1.7), [x]),
        "matmul": (T.matmul, [x, rng.normal(size=(d, 3))]),
        "matmul_batched": (T.matmul, [x, rng.normal(size=(b, d, 2))]),
        "layer_norm": (lambda a, g, bb: T.layer_norm(a, g, bb, 1e-6), [x, gamma, beta]),
        "softmax": (lambda a: T.softmax(a, -1), [x]),
        "softmax_axis1": (lambda a: T.softmax(a, 1), [x]),
        "log_softmax": (lambda a: T.log_softmax(a, -1), [x]),
        "gelu": (T.gelu, [x * 2]),
        "exp": (T.exp, [x]),
        "log": (T.log, [_pos(rng, (n, d))]),
        "mean": (lambda a: T.mean(a, axis=1), [x]),
        "sum": (lambda a: T.sum(a, axis=(0, 2), keepdims=True), [x]),
        "mse": (T.mse, [x, rng.normal(size=x.shape)]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [x]),
        "reshape": (lambda a: T.reshape(a, (-1,)), [x]),
        "concat": (lambda a, c: T.concat([a, c], axis=1), [x, rng.normal(size=(b, 2, d))]),
        "gather_rows": (lambda a: T.gather_rows(a, idx), [x]),
        "scatter_rows": (lambda s, base: T.scatter_rows(s, idx, base),
                         [rng.normal(size=(b, idx.shape[1], d)), x]),
        "broadcast_to": (lambda a: T.broadcast_to(a, (b, n, d)), [rng.normal(size=(1, 1, d))]),
        "getitem": (lambda a: a[:, 1:, :], [x]),
        "add_positional": (T.add_positional, [x, rng.normal(size=(n, d))]),
        "cross_entropy": (lambda a: T.cross_entropy(a, labels), [rng.normal(size=(n, d))]),
    }


def adv_loss_through_leaves(store, x, x_a, masks, cfg, distance="l2", f_clean=None):
    """L_adv with every parameter as a leaf; the clean branch is detached as in training.

    Returns ``(leaves, loss, f_clean)``.  Passing a cached ``f_clean`` freezes the clean
    branch, which is what the finite-difference oracle for stop-gradient differentiates.
    """
    from aemim.attack import feature_distance
    from aemim.model import Domain, domain_view, embed_images, encode, leaf_tensors

    leaves = leaf_tensors(store)
    dtype = store.get(next(iter(store.keys()))).dtype
    if f_clean is None:
        clean = encode(embed_images(x, cfg, dtype), masks, Domain.CLEAN, domain_view(leaves, Domain.CLEAN), cfg)
        f_clean = T.detach(clean)
    adv = encode(embed_images(x_a, cfg, dtype), masks, Domain.ADVERSARIAL,
                 domain_view(leaves, Domain.ADVERSARIAL), cfg)
    return leaves, feature_distance(adv, f_clean, distance), f_clean


def full_model_check(seed: int = 3) -> dict[str, float]:
    """Relative FD error per parameter of a 2-block float64 tiny ViT under the masked loss.

    Adversarial adapters are absent from a clean-domain loss, so their autodiff
    gradient must be exactly zero; they are reported as 0 error only if it is.
    """
    from aemim import mim
    from aemim.model import Domain, ModelConfig, forward, init_params, leaf_tensors

    cfg = ModelConfig(image_size=8, patch_size=4, channels=1, enc_dim=8, enc_depth=2, enc_heads=2,
                      dec_dim=8, dec_depth=2, dec_heads=2, mask_ratio=0.5)
    rng = np.random.default_rng(seed)
    store = init_params(cfg, seed, dtype=np.float64)
    for k, v in store.items():  # move off the symmetric init so every path is exercised
        store.set(k, v + rng.normal(0, 0.05, size=v.shape))
    images = rng.uniform(0, 255, size=(2, 1, 8, 8))
    masks = mim.sample_masks(2, cfg.n_patches, cfg.mask_ratio, rng)
    target = mim.reconstruction_target(images / 255.0, cfg.patch_size)

    def loss_of(st):
        leaves = leaf_tensors(st)
        return leaves, mim.reconstruction_loss(forward(images, masks, Domain.CLEAN, leaves, cfg), target, masks)

    leaves, loss = loss_of(store)
    grads = T.grad(loss, leaves)
    errs = {}
    for key in store.keys():
        if key.startswith("adv/"):
            errs[key] = 0.0 if not grads[key].any() else float("inf")
            continue
        work = store.copy()

        def f(val, key=key, work=work):
            work.set(key, val)
            return loss_of(work)[1].item()

        errs[key] = rel_err(grads[key], numeric_grad(f, store.get(key)))
    return errs
