"""End-to-end central-difference check of every model parameter.

Re-evaluating the full forward pass twice per parameter is too slow for tens of
thousands of parameters, so the loss is re-evaluated in stages:

* heads and point-branch parameters are perturbed in place and only the
  affected part of the model is recomputed;
* convolution parameters in the BEV branch use the fact that a convolution is
  affine in its weights: the perturbed pre-activation of that one layer is
  formed exactly, and everything downstream is recomputed numerically, batched
  over many perturbations at once.

The staged loss is asserted to equal the model's own loss at the base point.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from marseg.align import align_sequence
from marseg.bev import BevConfig
from marseg.core import decompose_labels
from marseg.mars import (
    MarsConfig,
    MarsModel,
    cffe_embed,
    prepare_sample,
    toy_backbone_forward,
)
from marseg.synth import generate_sequence, random_scene_spec
from marseg.tensor_nn import Tensor, conv2d, linear, max_pool2, no_grad, take, upsample2
from marseg.train_eval import combined_loss

from gradcheck import STEP, rel_error

UNET_LAYERS = ("enc1", "enc2", "mid", "dec2", "dec1", "out")


@dataclass
class CheckResult:
    names: list
    rel_errors: np.ndarray
    seconds: float
    base_mismatch: float

    @property
    def passed_fraction(self) -> float:
        return float(np.mean(self.rel_errors < 1e-4))


def micro_sample(seed: int = 0, total_points: int = 50, grid: int = 8):
    """3 frames, ``grid`` x ``grid`` BEV, ``total_points`` points over the three frames."""
    per = -(-total_points // 3)
    frames, poses, tax = generate_sequence(random_scene_spec(seed, points_per_frame=per), seed)
    drop = 3 * per - total_points
    if drop:
        f0 = frames[0]
        frames[0] = type(f0)(f0.xyz[drop:], f0.intensity[drop:], f0.labels[drop:], f0.frame_index)
    cfg = MarsConfig(bev=BevConfig(grid, grid, 20.0 / grid))
    model = MarsModel(cfg, seed=seed)
    return model, prepare_sample(align_sequence(frames, poses), cfg), tax


def model_loss(model, sample, tax) -> float:
    with no_grad():
        out = model.forward(sample)
        return combined_loss(out.s_c, out.s_m, sample.labels, tax).item()


def _batched_loss(s_c: np.ndarray, s_m: np.ndarray, gt: np.ndarray, tax) -> np.ndarray:
    """Loss per leading batch entry: mean CE plus masked-mean BCE (weights 1)."""
    semantic, moving = decompose_labels(gt, tax)
    m = s_c.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(s_c - m).sum(axis=-1, keepdims=True)))[..., 0]
    ce = (lse - np.take_along_axis(s_c, np.broadcast_to(semantic, s_c.shape[:-1])[..., None], axis=-1)[..., 0]).mean(-1)
    mask = tax.movable_mask[semantic]
    if not mask.any():
        return ce
    z = s_m[..., mask]
    t = moving[mask].astype(np.float64)
    bce = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean(-1)
    return ce + bce


class StagedLoss:
    def __init__(self, model: MarsModel, sample, tax):
        self.model, self.sample, self.tax = model, sample, tax
        self.p = model.params
        self.cfg = model.config
        with no_grad():
            self._cache()

    # ------------------------------------------------------------ caching

    def _cache(self):
        self.ps = self._point_features()
        x = self.sample.bev_frames
        self.act = {"x": x}
        pre = self._conv("bev.unet.enc1", x)
        self.base_U = self._unet_rest("enc1", pre[None], record=True)[0]

    def _point_features(self) -> np.ndarray:
        p, s, cfg = self.p, self.sample, self.cfg
        emb = cffe_embed(p, Tensor(s.descriptors), s.frame_id, cfg.frames, cfg.use_cffe)
        return take(toy_backbone_forward(p, emb, s.voxels), s.target_rows).data

    # ------------------------------------------------------------ staged evaluation

    def _conv(self, name, x):
        return conv2d(Tensor(x), self.p[f"{name}.weight"], self.p[f"{name}.bias"]).data

    def _unet_rest(self, layer: str, pre: np.ndarray, record: bool = False) -> np.ndarray:
        """Continue the encoder-decoder from the pre-activation of ``layer``.

        ``pre`` carries a leading perturbation axis P; returns U with shape (P, k, D_u, H, W).
        With ``record`` the input of every later layer is cached for the base point.
        """
        a = self.act
        P, k = pre.shape[:2]
        tile = lambda t: np.broadcast_to(t, (P, *t.shape)).reshape(P * k, *t.shape[1:])
        keep = lambda key, t: a.__setitem__(key, t) if record else None
        order = UNET_LAYERS.index(layer)
        v = pre.reshape(P * k, *pre.shape[2:])
        if order <= 0:
            e1 = np.maximum(v, 0)
            keep("e1", e1)
            inp = max_pool2(Tensor(e1)).data
            keep("enc2_in", inp)
            v = self._conv("bev.unet.enc2", inp)
        else:
            e1 = tile(a["e1"])
        if order <= 1:
            e2 = np.maximum(v, 0)
            keep("e2", e2)
            inp = max_pool2(Tensor(e2)).data
            keep("mid_in", inp)
            v = self._conv("bev.unet.mid", inp)
        else:
            e2 = tile(a["e2"])
        if order <= 2:
            inp = np.concatenate([upsample2(Tensor(np.maximum(v, 0))).data, e2], axis=1)
            keep("dec2_in", inp)
            v = self._conv("bev.unet.dec2", inp)
        if order <= 3:
            inp = np.concatenate([upsample2(Tensor(np.maximum(v, 0))).data, e1], axis=1)
            keep("dec1_in", inp)
            v = self._conv("bev.unet.dec1", inp)
        if order <= 4:
            inp = np.maximum(v, 0)
            keep("out_in", inp)
            v = self._conv("bev.unet.out", inp)
        return v.reshape(P, k, *v.shape[1:])

    def _fm_pre(self, U: np.ndarray) -> dict:
        """Per-branch pre-activations for U with shape (P, k, D_u, H, W)."""
        P, k = U.shape[:2]
        D = (U[:, k - 1 :] - U[:, : k - 1]).reshape(P, (k - 1) * U.shape[2], *U.shape[3:])
        return {kk: self._conv(f"bev.fm.k{kk}", D) for kk in self.cfg.kernels}

    def _heads_loss(self, fm_pre: dict, ps: np.ndarray | None = None) -> np.ndarray:
        z = np.concatenate([np.maximum(fm_pre[kk], 0) for kk in self.cfg.kernels], axis=1)  # (P, D_z, H, W)
        P = z.shape[0]
        pix = self.sample.target_pixels
        g = z.reshape(P, z.shape[1], -1)[:, :, np.where(pix >= 0, pix, 0)].transpose(0, 2, 1) * (pix >= 0)[None, :, None]
        ps = self.ps if ps is None else ps
        fused = np.concatenate([np.broadcast_to(ps, (P, *ps.shape)), g], axis=-1)
        p = self.p
        h = np.maximum(linear(Tensor(fused), p["heads.cls1.weight"], p["heads.cls1.bias"]).data, 0)
        s_c = linear(Tensor(h), p["heads.cls2.weight"], p["heads.cls2.bias"]).data
        h = np.maximum(linear(Tensor(fused), p["heads.mot1.weight"], p["heads.mot1.bias"]).data, 0)
        s_m = linear(Tensor(h), p["heads.mot2.weight"], p["heads.mot2.bias"]).data[..., 0]
        return _batched_loss(s_c, s_m, self.sample.labels, self.tax)

    def base(self) -> float:
        with no_grad():
            return float(self._heads_loss(self._fm_pre(self.base_U[None]))[0])

    # ------------------------------------------------------------ finite differences

    def _conv_perturbations(self, x: np.ndarray, base_pre: np.ndarray, weight_shape, idx, sign) -> np.ndarray:
        """Exact pre-activations after moving one weight (or bias) entry by ``sign * STEP``.

        ``x`` (B, C_in, H, W) is the layer input, ``base_pre`` (B, C_out, H, W) its output.
        ``idx`` are flat indices into weights followed by biases.
        """
        c_out, c_in, k, _ = weight_shape
        n_w = c_out * c_in * k * k
        B, _, H, W = x.shape
        pad = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.broadcast_to(base_pre, (len(idx), *base_pre.shape)).copy()
        for j, flat in enumerate(idx):
            if flat < n_w:
                o, c, u, v = np.unravel_index(flat, (c_out, c_in, k, k))
                out[j, :, o] += sign * STEP * xp[:, c, u : u + H, v : v + W]
            else:
                out[j, :, flat - n_w] += sign * STEP
        return out

    def numeric_conv_layer(self, name: str, chunk: int = 128) -> np.ndarray:
        """FD gradient for all entries of ``name``.weight and ``name``.bias, flattened."""
        w = self.p[f"{name}.weight"]
        n = w.size + self.p[f"{name}.bias"].size
        a = self.act
        if name.startswith("bev.fm."):
            kk = int(name.rsplit("k", 1)[1])
            U = self.base_U
            D = (U[-1:] - U[:-1]).reshape(1, -1, *U.shape[2:])
            base_pre = self._conv(name, D)[0][None]  # (1, C_out, H, W)
        else:
            layer = name.split(".")[-1]
            x = {"enc1": a["x"], "enc2": a["enc2_in"], "mid": a["mid_in"], "dec2": a["dec2_in"],
                 "dec1": a["dec1_in"], "out": a["out_in"]}[layer]
            base_pre = self._conv(name, x)
        grads = np.empty(n)
        for lo in range(0, n, chunk):
            idx = np.arange(lo, min(n, lo + chunk))
            vals = []
            for sign in (+1, -1):
                if name.startswith("bev.fm."):
                    pre = self._conv_perturbations(D, base_pre, w.shape, idx, sign)[:, 0]
                    base_fm = self._fm_pre(self.base_U[None])
                    fm = {b: np.broadcast_to(v, (len(idx), *v.shape[1:])) for b, v in base_fm.items()}
                    fm[kk] = pre
                    vals.append(self._heads_loss(fm))
                else:
                    pre = self._conv_perturbations(x, base_pre, w.shape, idx, sign)
                    vals.append(self._heads_loss(self._fm_pre(self._unet_rest(layer, pre))))
            grads[idx] = (vals[0] - vals[1]) / (2 * STEP)
        return grads

    def numeric_inplace(self, name: str, fn) -> np.ndarray:
        t = self.p[name]
        flat = t.data.reshape(-1)
        g = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + STEP
            up = fn()
            flat[i] = orig - STEP
            down = fn()
            flat[i] = orig
            g[i] = (up - down) / (2 * STEP)
        return g

    def head_loss_fn(self):
        fm = self._fm_pre(self.base_U[None])
        return lambda: float(self._heads_loss(fm)[0])

    def point_loss_fn(self):
        fm = self._fm_pre(self.base_U[None])
        return lambda: float(self._heads_loss(fm, ps=self._point_features())[0])


def full_check(seed: int = 0) -> CheckResult:
    model, sample, tax = micro_sample(seed)
    start = time.perf_counter()
    model.params.zero_grad()
    out = model.forward(sample)
    combined_loss(out.s_c, out.s_m, sample.labels, tax).backward()
    analytic = {n: t.grad.reshape(-1).copy() for n, t in model.params.items()}

    staged = StagedLoss(model, sample, tax)
    mismatch = abs(staged.base() - model_loss(model, sample, tax))
    names, errs = [], []
    with no_grad():
        head_fn, point_fn = staged.head_loss_fn(), staged.point_loss_fn()
        done = set()
        for name in model.params:
            if name in done:
                continue
            layer = name.rsplit(".", 1)[0]
            if name.startswith("bev."):
                num = staged.numeric_conv_layer(layer)
                ana = np.concatenate([analytic[f"{layer}.weight"], analytic[f"{layer}.bias"]])
                members = [f"{layer}.weight", f"{layer}.bias"]
            else:
                fn = head_fn if name.startswith("heads.") else point_fn
                num = staged.numeric_inplace(name, fn)
                ana = analytic[name]
                members = [name]
            done.update(members)
            names.extend(f"{layer}[{i}]" if name.startswith("bev.") else f"{name}[{i}]" for i in range(len(num)))
            errs.append(rel_error(ana, num))
    return CheckResult(names, np.concatenate(errs), time.perf_counter() - start, mismatch)


# Seed of the micro-sample used by the acceptance check. Chosen by scanning seeds for the widest kink
# margin: a central difference straddling a ReLU or max-pool switch measures a secant, not a gradient.
KINK_FREE_SEED = 178


def kink_margins(model: MarsModel, sample) -> tuple[float, float]:
    """Smallest |ReLU input| and smallest nonzero top-2 gap of any max-pool window in one forward pass."""
    import marseg.mars as mars

    rel, gaps = [], []
    orig_relu, orig_pool = mars.relu, mars.max_pool2

    def watch_relu(x):
        rel.append(float(np.abs(x.data).min()))
        return orig_relu(x)

    def watch_pool(x):
        *lead, H, W = x.shape
        b = np.sort(np.moveaxis(x.data.reshape(*lead, H // 2, 2, W // 2, 2), -3, -2).reshape(-1, 4), axis=1)
        g = b[:, 3] - b[:, 2]
        gaps.append(float(g[g > 0].min()) if (g > 0).any() else np.inf)
        return orig_pool(x)

    mars.relu, mars.max_pool2 = watch_relu, watch_pool
    try:
        with no_grad():
            model.forward(sample)
    finally:
        mars.relu, mars.max_pool2 = orig_relu, orig_pool
    return min(rel), min(gaps)
