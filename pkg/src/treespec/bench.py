"""Decode benchmarks: tokens per step (portable) and tokens per second (informational).

Accounting counts decode steps only. The token that falls out of the prompt
prefill is reported separately as ``prefill_tokens`` and is not a step, so a
plain decoder scores exactly 0 extra tokens per step.
"""

from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .target import TargetModel, vanilla_decode
from .verify import OracleDrafter, StepTrace, spec_decode_loop

__all__ = ["PromptReport", "BenchReport", "run_bench", "MODES"]

MODES = ("vanilla", "spec", "oracle")


@dataclass
class PromptReport:
    prompt: int
    steps: int
    total_tokens: int  # emitted by decode steps, prefill token excluded
    prefill_tokens: int
    seconds: float
    histogram: dict[int, int] = field(default_factory=dict)  # accepted draft depth -> steps

    @property
    def extra_tokens_per_step(self) -> float:
        return (self.total_tokens - self.steps) / self.steps if self.steps else 0.0

    @property
    def tokens_per_second(self) -> float:
        n = self.total_tokens + self.prefill_tokens
        return n / self.seconds if self.seconds > 0 else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["histogram"] = {str(k): v for k, v in sorted(self.histogram.items())}
        d["extra_tokens_per_step"] = self.extra_tokens_per_step
        d["tokens_per_second"] = self.tokens_per_second
        return d

    @classmethod
    def from_trace(cls, index: int, trace: StepTrace, seconds: float) -> PromptReport:
        hist = Counter(r.depth_accepted for r in trace.records)
        return cls(index, trace.steps, trace.emitted, trace.prefill_tokens, seconds, dict(hist))


@dataclass
class BenchReport:
    mode: str
    prompts: list[PromptReport]
    config: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return sum(p.steps for p in self.prompts)

    @property
    def total_tokens(self) -> int:
        return sum(p.total_tokens for p in self.prompts)

    @property
    def extra_tokens_per_step(self) -> float:
        s = self.steps
        return (self.total_tokens - s) / s if s else 0.0

    @property
    def seconds(self) -> float:
        return sum(p.seconds for p in self.prompts)

    @property
    def tokens_per_second(self) -> float:
        n = sum(p.total_tokens + p.prefill_tokens for p in self.prompts)
        return n / self.seconds if self.seconds > 0 else 0.0

    @property
    def histogram(self) -> dict[int, int]:
        h: Counter = Counter()
        for p in self.prompts:
            h.update(p.histogram)
        return dict(sorted(h.items()))

    def aggregate(self) -> dict:
        return {
            "kind": "aggregate",
            "mode": self.mode,
            "steps": self.steps,
            "total_tokens": self.total_tokens,
            "extra_tokens_per_step": self.extra_tokens_per_step,
            "tokens_per_second": self.tokens_per_second,
            "tokens_per_second_note": "informational",
            "histogram": {str(k): v for k, v in self.histogram.items()},
            "config": self.config,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "prompt", "mode": self.mode, **p.to_dict()}) for p in self.prompts]
        lines.append(json.dumps(self.aggregate()))
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        rows = [f"{'prompt':>6} {'steps':>6} {'tokens':>7} {'extra/step':>10} {'tok/s*':>8}"]
        for p in self.prompts:
            rows.append(f"{p.prompt:>6} {p.steps:>6} {p.total_tokens:>7} "
                        f"{p.extra_tokens_per_step:>10.3f} {p.tokens_per_second:>8.1f}")
        rows.append(f"{'all':>6} {self.steps:>6} {self.total_tokens:>7} "
                    f"{self.extra_tokens_per_step:>10.3f} {self.tokens_per_second:>8.1f}")
        hist = " ".join(f"{k}:{v}" for k, v in self.histogram.items())
        rows.append(f"accepted depth histogram: {hist}")
        rows.append("* tokens/second is informational; tokens/step is the portable metric")
        return "\n".join(rows)


def _vanilla_trace(model: TargetModel, prompt, max_new: int, temperature: float, rng) -> StepTrace:
    from .verify import StepRecord

    out = vanilla_decode(model, prompt, max_new, temperature, rng=rng)
    trace = StepTrace(prefill_tokens=1 if out else 0)
    for i in range(1, len(out)):
        trace.records.append(StepRecord(i - 1, 0, 1, i + 1))
    return trace


def run_bench(
    target: TargetModel,
    prompts,
    mode: str = "spec",
    speculator=None,
    max_new: int = 64,
    tree_shape=(4, 2, 2, 1, 1),
    temperature: float = 0.0,
    seed: int = 0,
    compressed_mask: bool = False,
) -> BenchReport:
    """Decode every prompt with a per-prompt generator seeded by ``(seed, index)``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "spec" and speculator is None:
        raise ValueError("spec mode needs a speculator")
    reports = []
    for i, prompt in enumerate(prompts):
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        if mode == "vanilla":
            trace = _vanilla_trace(target, prompt, max_new, temperature, rng)
        else:
            drafter = speculator if mode == "spec" else OracleDrafter(target)
            _, trace = spec_decode_loop(target, drafter, prompt, max_new, temperature, tree_shape, rng,
                                        compressed_mask)
        reports.append(PromptReport.from_trace(i, trace, time.perf_counter() - t0))
    config = {"max_new": max_new, "tree": list(tree_shape), "temperature": temperature, "seed": seed,
              "prompts": len(reports)}
    return BenchReport(mode, reports, config)
