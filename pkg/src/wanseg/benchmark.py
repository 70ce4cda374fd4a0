"""Desk-scale synthetic benchmark: baseline, four adaptation modes and the fine-tuned upper bound.

Run as ``python -m wanseg.benchmark`` to print per-seed IoUs and the median summary.
"""
from __future__ import annotations

import argparse
import dataclasses
import statistics
import time
from dataclasses import dataclass, field

from .data.dataset import PatchSet
from .data.synth import SOURCE_DEFAULT, TARGET_DEFAULT, SyntheticDomainSpec, generate_split, to_patchset
from .engine import AdaptConfig, adapt, finetune, new_generator, train_source
from .metrics import evaluate_dataset

ADAPT_MODES = ("osa", "lta", "os_wan", "lt_wan")


@dataclass
class BenchmarkConfig:
    source: SyntheticDomainSpec = SOURCE_DEFAULT
    target: SyntheticDomainSpec = TARGET_DEFAULT
    train_count: int = 200
    eval_count: int = 100
    seeds: tuple[int, ...] = (0, 1, 2)
    base_width: int = 8
    aux_width_factor: float = 0.125
    batch_size: int = 8
    source_steps: int = 300
    adapt_steps: int = 100
    finetune_steps: int = 150
    source_lr: float = 1e-3
    # adversarial defaults are sized for long full-width runs; at this scale they barely move
    adapt_overrides: dict = field(default_factory=lambda: {
        "finetune": {},
        "*": {"lr_generator": 2e-4, "lr_adversarial": 5e-5, "lr_discriminator": 1e-4},
    })

    def total_steps(self) -> int:
        return self.source_steps + self.adapt_steps + self.finetune_steps

    def run_config(self, mode: str, seed: int, steps: int) -> AdaptConfig:
        cfg = AdaptConfig(mode=mode, seed=seed, max_steps=steps, batch_size=self.batch_size,
                          base_width=self.base_width, aux_width_factor=self.aux_width_factor,
                          lr_generator=self.source_lr)
        if mode != "source_only":
            cfg = dataclasses.replace(cfg, **self.adapt_overrides.get(mode, self.adapt_overrides.get("*", {})))
        return cfg


@dataclass
class SeedResult:
    seed: int
    source_iou: dict[str, float] = field(default_factory=dict)
    target_iou: dict[str, float] = field(default_factory=dict)

    def drop(self, method: str) -> float:
        before = self.source_iou["baseline"]
        return (before - self.source_iou[method]) / before


@dataclass
class BenchmarkResult:
    seeds: list[SeedResult]
    seconds: float

    def median_target(self, method: str) -> float:
        return statistics.median(r.target_iou[method] for r in self.seeds)

    def median_source(self, method: str) -> float:
        return statistics.median(r.source_iou[method] for r in self.seeds)

    def median_drop(self, method: str) -> float:
        return statistics.median(r.drop(method) for r in self.seeds)

    def median_gain(self, method: str) -> float:
        return statistics.median(r.target_iou[method] - r.target_iou["baseline"] for r in self.seeds)

    def ordering_wins(self, better: str, worse: str) -> int:
        return sum(r.target_iou[better] >= r.target_iou[worse] for r in self.seeds)

    def table(self) -> str:
        methods = ["baseline", *ADAPT_MODES, "finetune"]
        lines = ["seed  " + "  ".join(f"{m:>15}" for m in methods)]
        for r in self.seeds:
            lines.append(f"{r.seed:<4}  " + "  ".join(
                f"{r.source_iou[m]:.3f}/{r.target_iou[m]:.3f}".rjust(15) for m in methods))
        lines.append("med   " + "  ".join(
            f"{self.median_source(m):.3f}/{self.median_target(m):.3f}".rjust(15) for m in methods))
        lines.append(f"(source-val IoU / target-test IoU; {self.seconds:.0f} s)")
        return "\n".join(lines)


def make_data(cfg: BenchmarkConfig) -> dict[str, PatchSet]:
    return {
        "source": to_patchset(generate_split(cfg.source, "train", cfg.train_count)),
        "source_val": to_patchset(generate_split(cfg.source, "val", cfg.eval_count)),
        "target": to_patchset(generate_split(cfg.target, "train", cfg.train_count)),
        "target_test": to_patchset(generate_split(cfg.target, "test", cfg.eval_count)),
    }


def _copy(generator, cfg: AdaptConfig):
    g = new_generator(cfg)
    g.load_state_dict(generator.state_dict())
    return g


def run_seed(cfg: BenchmarkConfig, data: dict[str, PatchSet], seed: int, log=None) -> SeedResult:
    result = SeedResult(seed)
    # the adaptation stream never carries target masks
    target_blind = data["target"].without_masks()

    def record(method, generator):
        result.source_iou[method] = evaluate_dataset(generator, data["source_val"]).iou
        result.target_iou[method] = evaluate_dataset(generator, data["target_test"]).iou
        if log:
            log(f"seed {seed} {method:>8}: source {result.source_iou[method]:.3f} "
                f"target {result.target_iou[method]:.3f}")

    base_cfg = cfg.run_config("source_only", seed, cfg.source_steps)
    baseline, _ = train_source(base_cfg, data["source"])
    record("baseline", baseline)
    for mode in ADAPT_MODES:
        run_cfg = cfg.run_config(mode, seed, cfg.adapt_steps)
        adapted = adapt(run_cfg, _copy(baseline, run_cfg), data["source"], target_blind).generator
        record(mode, adapted)
    ft_cfg = cfg.run_config("finetune", seed, cfg.finetune_steps)
    tuned, _ = finetune(ft_cfg, _copy(baseline, ft_cfg), data["target"])
    record("finetune", tuned)
    return result


def run(cfg: BenchmarkConfig, log=None) -> BenchmarkResult:
    start = time.perf_counter()
    data = make_data(cfg)
    seeds = [run_seed(cfg, data, s, log) for s in cfg.seeds]
    return BenchmarkResult(seeds, time.perf_counter() - start)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", default="0,1,2")
    args = parser.parse_args(argv)
    cfg = BenchmarkConfig(seeds=tuple(int(s) for s in args.seeds.split(",")))
    result = run(cfg, log=print)
    print(result.table())


if __name__ == "__main__":
    main()
