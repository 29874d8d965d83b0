"""Independent oracles shared by unit and acceptance tests."""

import itertools
import math

import numpy as np

from vivo import encoder


def reference_forward(params, batch):
    """Loop-level re-implementation of the encoder for a single item.

    Returns (rows, logits) where rows are last-layer vectors for text then
    region positions and logits are the head outputs for every row.
    """
    cfg = params.config
    h, nh = cfg.hidden, cfg.heads
    dh = h // nh
    n_text = len(batch.token_ids)
    inputs = []
    for i in range(n_text):
        inputs.append(params["tok_emb"][batch.token_ids[i]] + params["pos_emb"][batch.position_ids[i]]
                      + params["seg_emb"][batch.segment_ids[i]])
    for k in range(batch.regions.shape[0]):
        vec = np.zeros(h)
        for d in range(batch.regions.shape[1]):
            vec = vec + batch.regions[k, d] * params["region_w"][d]
        inputs.append(vec + params["region_b"] + params["seg_emb"][batch.segment_ids[n_text + k]])

    def layer_norm(v, g, b):
        mu = sum(v) / len(v)
        var = sum((x - mu) ** 2 for x in v) / len(v)
        return np.array([(x - mu) / math.sqrt(var + 1e-12) for x in v]) * g + b

    def gelu(x):
        return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))

    xs = [layer_norm(v, params["emb_ln_g"], params["emb_ln_b"]) for v in inputs]
    t = len(xs)
    for li in range(cfg.layers):
        p = f"layer{li}."
        qs = [x @ params[p + "q_w"] + params[p + "q_b"] for x in xs]
        ks = [x @ params[p + "k_w"] + params[p + "k_b"] for x in xs]
        vs = [x @ params[p + "v_w"] + params[p + "v_b"] for x in xs]
        new = []
        for i in range(t):
            ctx = np.zeros(h)
            for head in range(nh):
                sl = slice(head * dh, (head + 1) * dh)
                allowed = [j for j in range(t) if batch.attn_mask[i, j]]
                scores = {j: float(qs[i][sl] @ ks[j][sl]) / math.sqrt(dh) for j in allowed}
                top = max(scores.values())
                z = sum(math.exp(s - top) for s in scores.values())
                for j in allowed:
                    ctx[sl] += math.exp(scores[j] - top) / z * vs[j][sl]
            a = ctx @ params[p + "o_w"] + params[p + "o_b"]
            x1 = layer_norm(xs[i] + a, params[p + "ln1_g"], params[p + "ln1_b"])
            pre = x1 @ params[p + "ff1_w"] + params[p + "ff1_b"]
            f = np.array([gelu(v) for v in pre]) @ params[p + "ff2_w"] + params[p + "ff2_b"]
            new.append(layer_norm(x1 + f, params[p + "ln2_g"], params[p + "ln2_b"]))
        xs = new
    w = params["tok_emb"].T if cfg.tie_head else params["head_w"]
    rows = np.array(xs)
    return rows, rows @ w + params["head_b"]


def linear_loss(params, batches, weights):
    fr = encoder.forward(params, batches, keep_cache=False)
    return float((fr.slot_logits * weights).sum())


def gradient_check(params, batches, seed, eps=1e-4):
    """Relative error per parameter array between backward and central differences.

    The loss is a fixed random linear function of the slot logits followed
    by a log-softmax cross-entropy, so every parameter is exercised.
    """
    fr = encoder.forward(params, batches)
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, params.config.vocab_size, size=fr.slot_logits.shape[0])

    def loss_of(p):
        logits = encoder.forward(p, batches, keep_cache=False).slot_logits
        logp = encoder.log_softmax(logits)
        return float(-logp[np.arange(len(targets)), targets].sum())

    probs = encoder.softmax(fr.slot_logits)
    dlogits = probs.copy()
    dlogits[np.arange(len(targets)), targets] -= 1.0
    analytic = encoder.backward(params, fr, dlogits)
    errors = {}
    work = params.copy()
    for name, arr in work.items():
        num = np.zeros_like(arr)
        for idx in itertools.product(*[range(d) for d in arr.shape]):
            old = arr[idx]
            arr[idx] = old + eps
            up = loss_of(work)
            arr[idx] = old - eps
            down = loss_of(work)
            arr[idx] = old
            num[idx] = (up - down) / (2 * eps)
        a, n = analytic[name], num
        na, nn = np.linalg.norm(a), np.linalg.norm(n)
        if na < 1e-8 and nn < 1e-8:
            # gradient is structurally zero (e.g. key biases, unused rows): compare as zero
            errors[name] = 0.0
        else:
            errors[name] = float(np.linalg.norm(a - n) / max(na + nn, 1e-300))
    return errors
