"""Experiment orchestration: runs, artifacts, data generation, verification and diagnostics"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from ssaflsim.async_sim import Method, metrics_to_csv, run_method, run_ssafl
from ssaflsim.compare import compare_summaries, comparison_to_csv, load_summaries
from ssaflsim.config import worker_count
from ssaflsim.datagen import generate_dataset, generate_population
from ssaflsim.diagnostics import (
    estimate_trigger_bias,
    federated_gap,
    measure_staleness,
    pl_diagnostic,
    summarize,
)
from ssaflsim.display import DisplayTable
from ssaflsim.errors import NoWindows
from ssaflsim.excel_exporter import ExcelExporter
from ssaflsim.intent_core import (
    Verdict,
    configuration_plan,
    empirical_satisfaction,
    format_strategy,
    load_strategy,
    load_telemetry,
    parse_strategy,
    reliability_verdict,
)
from ssaflsim.similarity_engine import population_to_json

logger = logging.getLogger(__name__)

ARTIFACT_SUFFIXES = ('trace.jsonl', 'metrics.csv', 'summary.json')


def artifact_paths(out_dir, method, seed):
    """The three files one (method, seed) run produces"""
    out_dir = Path(out_dir)
    return [out_dir / f"{method}_{seed}.{suffix}" for suffix in ARTIFACT_SUFFIXES]


def _r2_text(summary):
    r2 = summary['final_r2']
    return '-' if r2 is None else f"{r2:.4f}"


def write_atomic(path, text):
    """Write through a temporary sibling and rename into place"""
    path = Path(path)
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'w', encoding='utf-8', newline='') as f:
        f.write(text)
    os.replace(tmp, path)


def execute_run(config, method, seed):
    """One (method, seed) run rendered to artifact texts; safe to call in a worker process"""
    result = run_method(method, config, seed)
    summary = summarize(result)
    return {
        'summary': summary,
        'trace': result.trace.to_jsonl(),
        'metrics': metrics_to_csv(result.metrics),
    }


class ExperimentRunner:
    """Main class driving the experiments of one config"""

    def __init__(self, config, workers=None):
        """Initialize runner"""
        self.config = config
        self.workers = workers or worker_count()
        self.display = DisplayTable()
        self.excel_exporter = ExcelExporter()
        self.out_dir = Path(config.output_dir)

    def _write_run(self, method, seed, rendered, written):
        trace_path, metrics_path, summary_path = artifact_paths(self.out_dir, method, seed)
        for path, text in ((trace_path, rendered['trace']),
                           (metrics_path, rendered['metrics']),
                           (summary_path, json.dumps(rendered['summary'], indent=2) + '\n')):
            written.append(path)
            write_atomic(path, text)

    def _remove_partial(self, written):
        for path in written:
            for candidate in (path, path.with_name(path.name + '.tmp')):
                try:
                    candidate.unlink()
                except FileNotFoundError:
                    pass
        if written:
            logger.warning("removed %d partial output files", len(written))

    def run(self):
        """Execute every (method, seed) pair and write its artifacts"""
        jobs = [(method, seed) for seed in self.config.seeds for method in self.config.methods]
        self.out_dir.mkdir(parents=True, exist_ok=True)

        print("\n" + "=" * 60)
        print("🚀 SSAFL EXPERIMENT")
        print("=" * 60)
        print(f"📊 {len(jobs)} runs: methods={', '.join(self.config.methods)} "
              f"seeds={', '.join(str(s) for s in self.config.seeds)} workers={self.workers}")

        written = []
        summaries = []
        try:
            if self.workers == 1 or len(jobs) == 1:
                for method, seed in jobs:
                    print(f"  • {method} seed={seed}...", end=' ', flush=True)
                    rendered = execute_run(self.config, method, seed)
                    self._write_run(method, seed, rendered, written)
                    summaries.append(rendered['summary'])
                    print(f"✓ (R²={_r2_text(rendered['summary'])}, "
                          f"uploads={rendered['summary']['total_uploads']})")
            else:
                with ProcessPoolExecutor(max_workers=min(self.workers, len(jobs))) as pool:
                    futures = [(method, seed, pool.submit(execute_run, self.config, method, seed))
                               for method, seed in jobs]
                    # Collect in submission order so output is independent of scheduling
                    for method, seed, future in futures:
                        rendered = future.result()
                        self._write_run(method, seed, rendered, written)
                        summaries.append(rendered['summary'])
                        print(f"  • {method} seed={seed} ✓")
        except BaseException:
            self._remove_partial(written)
            raise

        self.display.show_run_summaries(summaries)
        print(f"\n✅ Wrote {len(written)} files to {self.out_dir}")
        return summaries

    def compare(self, summary_glob, reference='SemiAsyn'):
        """Aggregate summaries into comparison.csv and comparison.xlsx"""
        summaries = load_summaries(summary_glob)
        rows = compare_summaries(summaries, reference)

        print("\n" + "=" * 60)
        print("📊 METHOD COMPARISON")
        print("=" * 60)
        self.display.show_comparison(rows, reference)

        self.out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = self.out_dir / 'comparison.csv'
        write_atomic(csv_path, comparison_to_csv(rows, reference))
        try:
            xlsx_path = self.excel_exporter.export(rows, summaries, str(self.out_dir), reference)
            print(f"\n✅ Comparison written to {csv_path} and {xlsx_path}")
        except OSError as e:
            print(f"⚠ Could not write the Excel workbook: {e}")
            print(f"\n✅ Comparison written to {csv_path}")
        return rows

    def generate_data(self, seed):
        """Write per-node partitions, the test set and the generator truth"""
        spec = replace(self.config.data, seed=seed)
        partitions, test, truth = generate_dataset(spec)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        header = ','.join([f"x{j}" for j in range(spec.input_dim)] + ['y'])

        def to_csv(dataset):
            rows = np.column_stack([dataset.inputs, dataset.targets])
            return header + '\n' + ''.join(','.join(repr(float(v)) for v in row) + '\n' for row in rows)

        paths = []
        for i, part in enumerate(partitions, start=1):
            path = self.out_dir / f"node_{i:02d}.csv"
            write_atomic(path, to_csv(part))
            paths.append(path)
        write_atomic(self.out_dir / 'test.csv', to_csv(test))
        truth_record = {
            'seed': seed,
            'v': truth.v.tolist(),
            'u': truth.u,
            'pair': list(truth.pair),
            'context_means': truth.context_means.tolist(),
        }
        write_atomic(self.out_dir / 'truth.json', json.dumps(truth_record, indent=2) + '\n')
        print(f"✅ Wrote {len(paths)} partitions "
              f"({sum(p.size for p in partitions)} rows), test.csv and truth.json to {self.out_dir}")
        return paths

    def generate_population(self, seed):
        """Write population.json for the configured data spec"""
        spec = replace(self.config.data, seed=seed)
        base = parse_strategy(self.config.strategy) if self.config.population.include_target else None
        population = generate_population(spec, self.config.population.pool_size, seed, base_strategy=base)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / 'population.json'
        write_atomic(path, population_to_json(population) + '\n')
        print(f"✅ Wrote {len(population)} node profiles to {path}")
        return path

    def verify(self, strategy_path, telemetry_path, p_min=0.9, reverify=True):
        """Check a deployed strategy against telemetry; re-verify federatedly when it fails"""
        strategy = load_strategy(strategy_path)
        samples = load_telemetry(telemetry_path)
        p_s = empirical_satisfaction(strategy, samples)
        verdict = reliability_verdict(p_s, p_min)

        print("\n" + "=" * 60)
        print("🔍 STRATEGY RELIABILITY CHECK")
        print("=" * 60)
        self.display.show_verification(strategy, p_s, verdict, p_min)

        if verdict is Verdict.STABLE:
            print("\n✅ Strategy is stable; no re-verification needed.")
            return p_s, verdict, None
        if not reverify:
            print("\n⚠ Strategy needs re-verification.")
            return p_s, verdict, None

        configuration_plan(strategy)
        seed = self.config.seeds[0]
        method = Method.SSAFL.value
        print(f"\n⚠ Satisfaction {p_s:.3f} < {p_min}; running SSAFL re-verification (seed={seed})...")
        written = []
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            config = replace(self.config, strategy=format_strategy(strategy))
            rendered = execute_run(config, method, seed)
            self._write_run(method, seed, rendered, written)
        except BaseException:
            self._remove_partial(written)
            raise
        self.display.show_run_summaries([rendered['summary']])
        print(f"\n✅ Re-verification artifacts written to {self.out_dir}")
        return p_s, verdict, rendered['summary']

    def diagnose(self, seed=None, with_pl=True, with_gap=True):
        """Staleness, trigger-bias, PL and federated-gap report for one SSAFL run"""
        seed = self.config.seeds[0] if seed is None else seed
        print("\n" + "=" * 60)
        print("🔬 SSAFL DIAGNOSTICS")
        print("=" * 60)

        print(f"📊 Running SSAFL (seed={seed})...")
        result = run_ssafl(self.config, seed)
        self.display.show_selection(result.selection, result.thresholds)
        staleness = measure_staleness(result.trace)
        try:
            zeta = estimate_trigger_bias(result.trace, result.windows)
        except NoWindows:
            print("⚠ No aggregation windows recorded; trigger bias unavailable")
            zeta = None

        pl_report = None
        if with_pl:
            d = self.config.diagnostics
            print(f"📊 Running the quadratic PL task (dim={d.quad_dim}, μ={d.mu}, L={d.L})...")
            pl_report = pl_diagnostic(d.quad_dim, d.mu, d.L, d, self.config.latency, seed)

        gap = None
        if with_gap:
            print(f"📊 Training the centralized reference ({self.config.diagnostics.central_epochs} epochs)...")
            gap = federated_gap(self.config, seed, result=result)

        self.display.show_diagnostics(staleness, zeta, pl_report, gap)
        report = {
            'seed': seed,
            'tau_max': staleness.tau_max,
            'tau_histogram': {str(k): v for k, v in staleness.histogram.items()},
            'zeta_hat': zeta,
            'pl': None if pl_report is None else {
                'mu_hat': pl_report.mu_hat,
                'L_hat': pl_report.L_hat,
                'eta': pl_report.eta,
                'contraction': pl_report.contraction,
                'contraction_bound': pl_report.contraction_bound,
                'plateau': pl_report.plateau,
                'events': pl_report.events,
            },
            'federated_gap': None if gap is None else {
                'param_distance': gap.param_distance,
                'federated_loss': gap.federated_loss,
                'centralized_loss': gap.centralized_loss,
                'federated_r2': gap.federated_r2,
                'centralized_r2': gap.centralized_r2,
            },
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"diagnostics_{seed}.json"
        write_atomic(path, json.dumps(report, indent=2) + '\n')
        print(f"\n✅ Diagnostics written to {path}")
        return report
