"""Continual-learning driver.

Two modes share the feature trunk:

* frcl: per task, train a fresh Gaussian weight posterior jointly with the
  trunk by maximising the variational objective (past tasks enter through
  their functional KL terms), then select inducing inputs, distill the task
  summary, and discard both the data and the weight posterior.
* baseline: per task, keep a plain linear head plus a uniform replay buffer;
  every step minimises current-task cross-entropy plus bias-corrected
  replayed losses for all stored buffers.

Boundaries are either given (run_task per dataset) or detected on a stream
of minibatches via the surprise detector, in which case the current task's
inputs are retained only in a bounded reservoir for inducing-point
selection.

Everything is seeded and single-threaded: identical (config, seed, data)
produces an identical metrics stream.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit as sigmoid

from . import boundary, features, objectives, selection, summaries
from .errors import UnknownTask
from .kernel import KernelConfig
from .numerics import gauss_hermite

EVAL_CHUNK = 4096


class Adam:
    """Adaptive-moment optimiser over a list of parameter arrays (in place)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads, maximize=False):
        self.t += 1
        sign = 1.0 if maximize else -1.0
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p += sign * self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class EngineConfig:
    mode: str = "frcl"  # frcl | baseline
    boundary_mode: str = "known"  # known | detected
    hidden_sizes: tuple = (256, 256)
    learning_rate: float = 5e-4
    batch_size: int = 100
    train_steps_per_task: int = 3000
    selection: selection.SelectionConfig = field(default_factory=selection.SelectionConfig)
    detector: boundary.DetectorState = field(default_factory=boundary.DetectorState)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    sigma_w2: float = 1.0
    quad_order: int = 20
    softmax_samples: int = 128
    kl_subsample: int | None = None
    stream_buffer_cap: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("frcl", "baseline"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.boundary_mode not in ("known", "detected"):
            raise ValueError(f"unknown boundary_mode {self.boundary_mode!r}")
        if self.mode == "baseline" and self.boundary_mode == "detected":
            raise ValueError("boundary detection runs in frcl mode only")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.train_steps_per_task < 0:
            raise ValueError("bad optimisation hyperparameters")

    @property
    def m_per_task(self) -> int:
        return self.selection.M


@dataclass
class BaselineHead:
    """Plain per-task output weights plus their optimiser state."""

    w: np.ndarray  # (num_functions, K)
    likelihood: objectives.Likelihood
    adam: Adam


@dataclass
class ReplayBuffer:
    """Uniform sample of one finished task; N/M corrects the loss bias."""

    X: np.ndarray
    y: np.ndarray
    task_size: int

    @property
    def buffer_size(self) -> int:
        return self.X.shape[0]


class _Reservoir:
    """Bounded uniform sample of the rows seen in the current task."""

    def __init__(self, cap: int, dim: int):
        self.cap = cap
        self.X = np.empty((cap, dim))
        self.y = np.empty(cap)
        self.filled = 0
        self.seen = 0

    def add(self, X_batch, y_batch, rng):
        for row, label in zip(X_batch, y_batch):
            self.seen += 1
            if self.filled < self.cap:
                self.X[self.filled] = row
                self.y[self.filled] = label
                self.filled += 1
            else:
                j = int(rng.integers(self.seen))
                if j < self.cap:
                    self.X[j] = row
                    self.y[j] = label

    def contents(self):
        return self.X[: self.filled], self.y[: self.filled]

    def reset(self):
        self.filled = 0
        self.seen = 0


def _fresh_detector(template: boundary.DetectorState) -> boundary.DetectorState:
    return boundary.DetectorState(
        threshold=template.threshold,
        min_time_in=template.min_time_in,
        aggregation=template.aggregation,
        log_space=template.log_space,
        window=template.window,
    )


class Engine:
    """Sequential state machine over a task stream. Not thread-safe."""

    def __init__(self, cfg: EngineConfig, input_dim: int, metrics=None):
        self.cfg = cfg
        self.kernel_config = KernelConfig(cfg.sigma_w2)
        self.quad = gauss_hermite(cfg.quad_order)
        self.rng = np.random.default_rng(cfg.seed)
        self.net = features.init_net(
            [input_dim, *cfg.hidden_sizes], seed=int(self.rng.integers(2**63))
        )
        self.adam_theta = Adam(
            self.net.param_arrays(), cfg.learning_rate,
            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon,
        )
        self.metrics = metrics if metrics is not None else (lambda record: None)
        self.step_count = 0
        self.task_count = 0
        # frcl state
        self.head: objectives.WeightPosterior | None = None
        self.head_adam: Adam | None = None
        self.head_likelihood: objectives.Likelihood | None = None
        self.summaries: list[summaries.TaskSummary] = []
        # baseline state
        self.baseline_heads: list[BaselineHead] = []
        self.buffers: list[ReplayBuffer] = []
        self._t0 = time.monotonic()

    def _wall_ms(self) -> float:
        return 1000.0 * (time.monotonic() - self._t0)

    def _emit(self, kind: str, **fields) -> None:
        record = {"kind": kind, "step": self.step_count, "task_id": self.task_count}
        record.update(fields)
        record["wall_ms"] = self._wall_ms()
        self.metrics(record)

    # ------------------------------------------------------------- frcl

    def _new_head(self, likelihood: objectives.Likelihood) -> None:
        self.head = objectives.init_posterior(
            self.net.feature_dim, likelihood.num_functions,
            seed=int(self.rng.integers(2**63)),
        )
        self.head_adam = Adam(
            self.head.param_arrays(), self.cfg.learning_rate,
            self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_epsilon,
        )
        self.head_likelihood = likelihood

    def _objective_step(self, X_batch, y_batch, task_size) -> objectives.ObjectiveReport:
        report = objectives.assemble_objective(
            self.net, self.head, X_batch, y_batch, task_size,
            self.summaries, self.head_likelihood, self.quad,
            config=self.kernel_config, subsample=self.cfg.kl_subsample,
            seed=int(self.rng.integers(2**63)),
            softmax_samples=self.cfg.softmax_samples,
        )
        self.adam_theta.step(report.grad_theta.arrays(), maximize=True)
        self.net.touch()
        self.head_adam.step([report.grad_mu, report.grad_L_raw], maximize=True)
        self.step_count += 1
        return report

    def _finalise_task(self, X_task, y_task) -> summaries.TaskSummary:
        """Select inducing inputs, distill, store, and drop the head."""
        sel_cfg = replace(self.cfg.selection, seed=int(self.rng.integers(2**63)))
        result = selection.select(
            sel_cfg, X_task, y_task, self.head, self.net, self.kernel_config,
            quad=self.quad, likelihood=self.head_likelihood,
        )
        summary = summaries.distill(
            self.head, np.asarray(X_task)[result.indices], self.net,
            self.kernel_config, task_id=self.task_count, likelihood=self.head_likelihood,
        )
        self.summaries.append(summary)
        self.task_count += 1
        self._emit(
            "task_end",
            num_inducing=summary.num_inducing,
            selection_score=None if np.isnan(result.final_score) else result.final_score,
            accepted_swaps=len(result.score_trace),
        )
        self.head = None
        self.head_adam = None
        return summary

    def run_task_known(self, X, y, likelihood: objectives.Likelihood) -> None:
        """Train on one task with a known boundary, then summarise it."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        N = X.shape[0]
        self._new_head(likelihood)
        B = min(self.cfg.batch_size, N)
        for _ in range(self.cfg.train_steps_per_task):
            idx = self.rng.choice(N, size=B, replace=False)
            report = self._objective_step(X[idx], y[idx], N)
            self._emit(
                "step",
                elbo=report.elbo,
                expected_loglik=report.expected_loglik,
                kl_current=report.kl_current,
                kl_regularisers=float(report.kl_regularisers.sum()),
            )
        self._finalise_task(X, y)

    def run_stream_detected(self, stream, likelihood: objectives.Likelihood) -> None:
        """Consume (X_batch, y_batch) minibatches with unknown boundaries.

        Surprise is scored on each batch before any update; a detection
        finalises the task from the reservoir and constructs a fresh head.
        The stream's trailing task is flushed at exhaustion.
        """
        detector = _fresh_detector(self.cfg.detector)
        reservoir: _Reservoir | None = None
        self._new_head(likelihood)
        for X_batch, y_batch in stream:
            X_batch = np.asarray(X_batch, dtype=np.float64)
            if reservoir is None:
                reservoir = _Reservoir(self.cfg.stream_buffer_cap, X_batch.shape[1])
            scores = boundary.surprise(
                self.head, self.net, self.kernel_config, X_batch, degenerate="limit"
            )
            detector, detected, statistic = boundary.step(detector, scores)
            if detected:
                self._emit("detection", statistic=statistic)
                self._finalise_task(*reservoir.contents())
                reservoir.reset()
                self._new_head(likelihood)
            reservoir.add(X_batch, y_batch, self.rng)
            report = self._objective_step(X_batch, y_batch, reservoir.seen)
            self._emit(
                "step",
                elbo=report.elbo,
                expected_loglik=report.expected_loglik,
                kl_current=report.kl_current,
                kl_regularisers=float(report.kl_regularisers.sum()),
                statistic=statistic,
            )
        if reservoir is not None and reservoir.seen:
            self._finalise_task(*reservoir.contents())

    # --------------------------------------------------------- baseline

    def _baseline_loss_terms(self, Phi, head: BaselineHead, y):
        """Summed cross-entropy and its logit gradients for one point set."""
        logits = Phi @ head.w.T
        if head.likelihood.kind == "bernoulli-logit":
            t = np.asarray(y, dtype=np.float64) * logits[:, 0]
            loss = float(np.logaddexp(0.0, -t).sum())
            dlogits = (-np.asarray(y, dtype=np.float64) * sigmoid(-t))[:, None]
        else:
            y_idx = np.asarray(y, dtype=np.intp)
            f_max = logits.max(axis=1, keepdims=True)
            lse = np.log(np.exp(logits - f_max).sum(axis=1)) + f_max[:, 0]
            loss = float((lse - logits[np.arange(len(y_idx)), y_idx]).sum())
            dlogits = np.exp(logits - lse[:, None])
            dlogits[np.arange(len(y_idx)), y_idx] -= 1.0
        return loss, dlogits

    def run_task_baseline(self, X, y, likelihood: objectives.Likelihood) -> None:
        """One task of the replay-buffer baseline; stores a buffer at the end."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        N = X.shape[0]
        w = 1e-3 * self.rng.standard_normal((likelihood.num_functions, self.net.feature_dim))
        head = BaselineHead(
            w=w,
            likelihood=likelihood,
            adam=Adam(
                [w], self.cfg.learning_rate,
                self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_epsilon,
            ),
        )
        self.baseline_heads.append(head)
        B = min(self.cfg.batch_size, N)
        for _ in range(self.cfg.train_steps_per_task):
            idx = self.rng.choice(N, size=B, replace=False)
            total, grad_theta = self._baseline_step_current(X[idx], y[idx], N / B, head)
            # replayed losses for every stored buffer, consumed whole
            for buf, past in zip(self.buffers, self.baseline_heads[:-1]):
                total += self._baseline_step_buffer(buf, past, grad_theta)
            self.adam_theta.step(grad_theta.arrays(), maximize=False)
            self.net.touch()
            self.step_count += 1
            self._emit("step", loss=total)
        buffer_size = min(self.cfg.m_per_task, N)
        keep = self.rng.choice(N, size=buffer_size, replace=False)
        self.buffers.append(ReplayBuffer(X=X[keep].copy(), y=y[keep].copy(), task_size=N))
        self.task_count += 1
        self._emit("task_end", buffer_size=buffer_size)

    def _baseline_step_current(self, X_batch, y_batch, scale, head):
        cache = features.forward_cached(self.net, X_batch)
        Phi = cache.activations[-1]
        loss, dlogits = self._baseline_loss_terms(Phi, head, y_batch)
        dlogits *= scale
        grad_w = dlogits.T @ Phi
        grad_theta = features.backward(self.net, X_batch, dlogits @ head.w, cache)
        head.adam.step([grad_w], maximize=False)
        return scale * loss, grad_theta

    def _baseline_step_buffer(self, buf, head, grad_theta):
        scale = buf.task_size / buf.buffer_size
        cache = features.forward_cached(self.net, buf.X)
        Phi = cache.activations[-1]
        loss, dlogits = self._baseline_loss_terms(Phi, head, buf.y)
        dlogits *= scale
        grad_w = dlogits.T @ Phi
        grad_theta.add_(features.backward(self.net, buf.X, dlogits @ head.w, cache))
        head.adam.step([grad_w], maximize=False)
        return scale * loss

    # -------------------------------------------------------- evaluation

    def run_task(self, X, y, likelihood: objectives.Likelihood) -> None:
        if self.cfg.mode == "baseline":
            self.run_task_baseline(X, y, likelihood)
        else:
            self.run_task_known(X, y, likelihood)

    def evaluate(self, eval_sets) -> tuple[list[float], float]:
        """Accuracy per finished task under the current trunk parameters.

        eval_sets is an ordered list of (X, y) pairs, one per task seen so
        far. frcl predicts through the stored summaries; baseline through
        its retained heads.
        """
        known = len(self.summaries) if self.cfg.mode == "frcl" else len(self.baseline_heads)
        if len(eval_sets) > known:
            raise UnknownTask(f"{len(eval_sets)} eval sets but only {known} finished tasks")
        accuracies = []
        for task_id, (X, y) in enumerate(eval_sets):
            X = np.asarray(X, dtype=np.float64)
            y = np.asarray(y)
            hits = 0
            for start in range(0, X.shape[0], EVAL_CHUNK):
                chunk = slice(start, start + EVAL_CHUNK)
                predicted = self._predict_labels(task_id, X[chunk])
                hits += int(np.sum(predicted == self._label_indices(task_id, y[chunk])))
            accuracies.append(hits / X.shape[0])
        return accuracies, float(np.mean(accuracies))

    def _likelihood_for(self, task_id: int) -> objectives.Likelihood:
        if self.cfg.mode == "frcl":
            return self.summaries[task_id].likelihood
        return self.baseline_heads[task_id].likelihood

    def _label_indices(self, task_id, y):
        if self._likelihood_for(task_id).kind == "bernoulli-logit":
            return ((np.asarray(y, dtype=np.int64) + 1) // 2).astype(np.intp)
        return np.asarray(y, dtype=np.intp)

    def _predict_labels(self, task_id: int, X) -> np.ndarray:
        if self.cfg.mode == "frcl":
            summary = self.summaries[task_id]
            means, variances = summaries.latent_moments(
                summary, X, self.net, self.kernel_config
            )
            probs = summaries.class_probabilities(
                summary.likelihood, means, variances, seed=task_id
            )
            return probs.argmax(axis=1)
        head = self.baseline_heads[task_id]
        logits = features.forward(self.net, X) @ head.w.T
        if head.likelihood.kind == "bernoulli-logit":
            return (logits[:, 0] > 0).astype(np.intp)
        return logits.argmax(axis=1)

    # -------------------------------------------------------- checkpoint

    def save_checkpoint(self, directory) -> None:
        """Feature-net checkpoint, one file per summary, and a manifest."""
        import os

        os.makedirs(directory, exist_ok=True)
        features.save_net(self.net, os.path.join(directory, "net.bin"))
        for i, summary in enumerate(self.summaries):
            summaries.save_summary(summary, os.path.join(directory, f"summary_{i:03d}.bin"))
        with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"mode={self.cfg.mode}\n")
            fh.write(f"step={self.step_count}\n")
            fh.write(f"task_count={self.task_count}\n")
            fh.write(f"seed={self.cfg.seed}\n")
