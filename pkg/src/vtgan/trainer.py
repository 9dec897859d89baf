"""Alternating adversarial training: Adam, discriminator and generator steps, checkpoints.

Checkpoint directory layout (under ``<run_dir>/checkpoints``)::

    latest/            most recent checkpoint (end of epoch, or where a run stopped)
    best/              lowest mean fine-scale MSE over an epoch
      weights.vtgw     every parameter and buffer of the model store
      optimizer.vtgw   Adam moments, keys "g.m.<path>", "g.v.<path>", "d.m.<path>", "d.v.<path>"
      config.json      run configuration snapshot
      state.json       step, epoch, batch position within the epoch, best MSE

The run log ``<run_dir>/log.jsonl`` is append-only; the first record echoes the
configuration and later records hold per-step losses and wall time.
"""

from __future__ import annotations

import json
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .blocks import ForwardContext
from .config import RunConfig, TrainConfig
from .data import PairDataset
from .discriminators import DiscriminatorPair, build_discriminators
from .extractors import FeatureExtractor, perceptual_extractor
from .generators import GeneratorPair, build_generators
from .losses import cce, embedding_feature_loss, hinge_d, hinge_g, mse, one_hot, perceptual, total_generator_objective
from .params import ParameterStore
from .resample import lanczos_resize
from .tensor import Tensor, no_grad
from .weights import load_weights, save_weights

G_PREFIX = "g_"
D_PREFIX = "vt_"


class NumericalError(FloatingPointError):
    pass


# --- Adam -------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, Tensor], state: OptimizerState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update of every trainable tensor in ``params``, in place."""
    active = {k: p for k, p in params.items() if p.requires_grad}
    missing = [k for k, p in active.items() if p.grad is None]
    if missing:
        raise ValueError(f"no gradient for trainable parameters: {missing[:5]}{' ...' if len(missing) > 5 else ''}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for k, p in active.items():
        g = p.grad
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


class Adam:
    def __init__(self, params: Mapping[str, Tensor], cfg: TrainConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.state = OptimizerState()

    def step(self) -> None:
        adam_step(self.params, self.state, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self, tag: str) -> dict[str, np.ndarray]:
        out = {}
        for k in self.state.m:
            out[f"{tag}.m.{k}"] = self.state.m[k]
            out[f"{tag}.v.{k}"] = self.state.v[k]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], tag: str, t: int) -> None:
        self.state = OptimizerState(t=int(t))
        for key, arr in arrays.items():
            head, _, path = key.partition(".")
            if head != tag:
                continue
            kind, _, path = path.partition(".")
            if path not in self.params:
                raise KeyError(f"optimizer state for unknown parameter {path}")
            (self.state.m if kind == "m" else self.state.v)[path] = np.array(arr)


# --- model --------------------------------------------------------------------------


def _check_finite(parts: Mapping[str, float], where: str) -> None:
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NumericalError(f"{where}: loss term {name!r} is {value}")


class Vtgan:
    """Generators, discriminators, their shared parameter store and both optimizers."""

    def __init__(self, cfg: RunConfig, extractor: FeatureExtractor | None = None):
        cfg.validate()
        self.cfg = cfg
        self.store = ParameterStore(cfg.gan.dtype)
        self.gens: GeneratorPair = build_generators(cfg.gan, self.store, cfg.seed)
        self.discs: DiscriminatorPair = build_discriminators(cfg.gan, self.store, cfg.seed)
        self.extractor = extractor or perceptual_extractor(cfg.paths.perceptual_weights)
        self.opt_g = Adam(self.store.parameters(G_PREFIX), cfg.train)
        self.opt_d = Adam(self.store.parameters(D_PREFIX), cfg.train)
        self.step = 0  # generator steps taken
        self.d_step = 0

    def _batch(self, fundus: np.ndarray, angio: np.ndarray):
        dt = self.store.dtype
        x_hi = np.asarray(fundus, dtype=dt)
        y_hi = np.asarray(angio, dtype=dt)
        return x_hi, lanczos_resize(x_hi, 2, "down"), y_hi, lanczos_resize(y_hi, 2, "down")

    def discriminator_step(self, fundus, angio, labels) -> dict[str, float]:
        """Hinge + weighted CCE at both scales; updates discriminator parameters only."""
        x_hi, x_lo, y_hi, y_lo = self._batch(fundus, angio)
        with no_grad():
            fake_hi, fake_lo = self.gens.forward(
                Tensor(x_hi), Tensor(x_lo), ForwardContext("train", self.cfg.seed, self.d_step, update_stats=False)
            )
        ctx = ForwardContext("train", self.cfg.seed, 1_000_000 + self.d_step)
        target = one_hot(labels, self.cfg.gan.num_classes)
        lam = self.cfg.loss.cce
        self.opt_d.zero_grad()
        total = None
        parts = {}
        for scale, disc, x, y, fake in (
            ("fine", self.discs.fine, x_hi, y_hi, fake_hi.data),
            ("coarse", self.discs.coarse, x_lo, y_lo, fake_lo.data),
        ):
            real = disc(x, y, ctx)
            fake_out = disc(x, fake, ctx)
            h = hinge_d(real.adv_map, fake_out.adv_map)
            c = cce(target, real.class_probs)
            parts[f"d_hinge_{scale}"] = h.item()
            parts[f"d_cce_{scale}"] = c.item()
            term = h + lam * c
            total = term if total is None else total + term
        parts["d_total"] = total.item()
        _check_finite(parts, "discriminator step")
        total.backward()
        self.opt_d.step()
        self.d_step += 1
        return parts

    def generator_step(self, fundus, angio) -> dict[str, float]:
        """Weighted generator objective summed over both scales, discriminators frozen."""
        x_hi, x_lo, y_hi, y_lo = self._batch(fundus, angio)
        self.store.freeze(D_PREFIX)
        try:
            self.opt_g.zero_grad()
            fake_hi, fake_lo = self.gens.forward(
                Tensor(x_hi), Tensor(x_lo), ForwardContext("train", self.cfg.seed, self.step)
            )
            ev = ForwardContext.eval()
            terms = {}
            for scale, disc, x, y, fake in (
                ("fine", self.discs.fine, x_hi, y_hi, fake_hi),
                ("coarse", self.discs.coarse, x_lo, y_lo, fake_lo),
            ):
                terms[f"adv_{scale}"] = hinge_g(disc(x, fake, ev).adv_map)
                terms[f"mse_{scale}"] = mse(fake, y)
                terms[f"perc_{scale}"] = perceptual(fake, y, self.extractor)
                terms[f"ef_{scale}"] = embedding_feature_loss(x, y, fake, disc, ev)
            parts = {k: terms[f"{k}_fine"] + terms[f"{k}_coarse"] for k in ("adv", "mse", "perc", "ef")}
            total = total_generator_objective(parts, self.cfg.loss)
            out = {k: v.item() for k, v in terms.items()}
            out.update({f"g_{k}": v.item() for k, v in parts.items()})
            out["g_total"] = total.item()
            _check_finite(out, "generator step")
            total.backward()
            self.opt_g.step()
        finally:
            self.store.unfreeze(D_PREFIX)
        self.step += 1
        return out

    def train_step(self, fundus, angio, labels) -> dict[str, float]:
        """``d_steps_per_g_step`` discriminator steps followed by one generator step."""
        record = {}
        for k in range(self.cfg.train.d_steps_per_g_step):
            d = self.discriminator_step(fundus, angio, labels)
            if k == self.cfg.train.d_steps_per_g_step - 1:
                record.update(d)
        record.update(self.generator_step(fundus, angio))
        return record

    # --- persistence --------------------------------------------------------------

    def save_checkpoint(self, directory: str | Path, state: Mapping) -> Path:
        directory = Path(directory)
        tmp = directory.with_name(directory.name + ".partial")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        meta = {"kind": "vtgan_model", "step": self.step, "config": self.cfg.to_dict()}
        save_weights(tmp / "weights.vtgw", self.store.state_dict(), meta)
        opt = {**self.opt_g.state_arrays("g"), **self.opt_d.state_arrays("d")}
        save_weights(tmp / "optimizer.vtgw", opt, {"g_t": self.opt_g.state.t, "d_t": self.opt_d.state.t})
        self.cfg.save(tmp / "config.json")
        full_state = dict(state, step=self.step, d_step=self.d_step)
        (tmp / "state.json").write_text(json.dumps(full_state, sort_keys=True) + "\n")
        if directory.exists():
            shutil.rmtree(directory)
        tmp.rename(directory)
        return directory

    def load_checkpoint(self, directory: str | Path) -> dict:
        directory = Path(directory)
        try:
            arrays, _ = load_weights(directory / "weights.vtgw")
            opt, meta = load_weights(directory / "optimizer.vtgw")
            state = json.loads((directory / "state.json").read_text())
        except OSError as exc:
            raise OSError(f"cannot read checkpoint {directory}: {exc}") from exc
        self.store.load_state_dict(arrays)
        self.opt_g.load_state_arrays(opt, "g", meta["g_t"])
        self.opt_d.load_state_arrays(opt, "d", meta["d_t"])
        self.step = int(state["step"])
        self.d_step = int(state["d_step"])
        return state

    def load_weights(self, path: str | Path, strict: bool = True) -> None:
        arrays, _ = load_weights(path)
        self.store.load_state_dict(arrays, strict=strict)

    def classify(self, fundus, angio) -> np.ndarray:
        """Class probabilities ``(B, 2)`` from the fine-scale discriminator, in eval mode."""
        with no_grad():
            out = self.discs.fine(np.asarray(fundus, self.store.dtype), np.asarray(angio, self.store.dtype))
        return out.class_probs.data


# --- training loop --------------------------------------------------------------------


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 3, epoch]).permutation(n)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


@dataclass
class TrainResult:
    model: Vtgan
    history: list[dict]
    run_dir: Path
    stopped_early: bool = False


class RunLog:
    def __init__(self, path: Path):
        self.path = path

    def write(self, record: Mapping) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(
    dataset: PairDataset,
    cfg: RunConfig,
    run_dir: str | Path | None = None,
    resume: bool = False,
    max_steps: int | None = None,
    extractor: FeatureExtractor | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run (or continue) training.

    Batches are visited in an order fixed by ``(seed, epoch)``; dropout masks
    are keyed by the step counter, so resuming from a checkpoint continues the
    exact trajectory. ``max_steps`` caps the total number of generator steps.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    run_dir = Path(run_dir or cfg.paths.run_dir)
    ckpt_root = run_dir / "checkpoints"
    ckpt_root.mkdir(parents=True, exist_ok=True)
    log = RunLog(run_dir / "log.jsonl")
    model = Vtgan(cfg, extractor)
    tc = cfg.train
    n = len(dataset)
    nb = batches_per_epoch(n, tc.batch_size)

    epoch, batch_pos, best = 0, 0, math.inf
    epoch_mse: list[float] = []
    if resume and (ckpt_root / "latest").exists():
        state = model.load_checkpoint(ckpt_root / "latest")
        epoch, batch_pos, best = state["epoch"], state["batch"], state.get("best_mse", math.inf)
        epoch_mse = list(state.get("epoch_mse", []))
        log.write({"event": "resume", "step": model.step, "epoch": epoch, "batch": batch_pos})
    else:
        if (run_dir / "log.jsonl").exists():
            (run_dir / "log.jsonl").unlink()
        log.write({
            "event": "config",
            "epochs": tc.epochs,
            "batch_size": tc.batch_size,
            "d_steps_per_g_step": tc.d_steps_per_g_step,
            "config": cfg.to_dict(),
        })

    def state() -> dict:
        return {"epoch": epoch, "batch": batch_pos, "best_mse": best if math.isfinite(best) else None,
                "epoch_mse": epoch_mse}

    history: list[dict] = []
    t0 = time.perf_counter()
    stopped = False
    while epoch < tc.epochs:
        order = epoch_order(n, cfg.seed, epoch)
        while batch_pos < nb:
            if max_steps is not None and model.step >= max_steps:
                stopped = True
                break
            idx = order[batch_pos * tc.batch_size : (batch_pos + 1) * tc.batch_size]
            fundus, angio, labels = dataset.batch(idx, dtype=model.store.dtype)
            record = model.train_step(fundus, angio, labels)
            batch_pos += 1
            epoch_mse.append(record["mse_fine"])
            record = {"step": model.step, "epoch": epoch, "wall": round(time.perf_counter() - t0, 4), **record}
            history.append(record)
            if tc.log_every and model.step % tc.log_every == 0:
                log.write(record)
            if on_step:
                on_step(record)
            if tc.checkpoint_every and model.step % tc.checkpoint_every == 0:
                model.save_checkpoint(ckpt_root / "latest", state())
        if stopped:
            break
        mean_mse = float(np.mean(epoch_mse)) if epoch_mse else math.inf
        epoch, batch_pos, epoch_mse = epoch + 1, 0, []
        if mean_mse < best:
            best = mean_mse
            model.save_checkpoint(ckpt_root / "best", state())
        model.save_checkpoint(ckpt_root / "latest", state())
        log.write({"event": "epoch", "epoch": epoch, "mean_mse_fine": mean_mse, "step": model.step})
    if stopped:
        model.save_checkpoint(ckpt_root / "latest", state())
    return TrainResult(model, history, run_dir, stopped)
