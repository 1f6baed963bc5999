#!/usr/bin/env python3
"""
g2kit Command-Line Pipeline
Wires simulation, correlation, estimation, uncertainty budgets and lifetime
fits into reproducible commands that write CSV/JSON outputs and a manifest.
"""

import argparse
import hashlib
import json
import logging
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import metrics
from correlator import Chronogram, cross_correlate, default_geometry, export_chronogram, \
    import_chronogram, is_chronogram_csv
from errors import G2KitError, UsageError
from estimator import AlphaEstimate, estimate_alpha, export_sweep, low_flux_check, sweep_widths, \
    validate_window, window_sweep
from lifetime import aggregate_lifetime, export_fit, fit_lifetime
from settings import VERSION, PipelineConfig, from_mapping, load_key_values, log_dir, log_level
from simulator import SimConfig, load_config, simulate_joint_run, simulate_run, simulate_series
from timetag import TTAG_MAGIC, RunMetadata, TimeTagStream, import_csv, read_csv_metadata, \
    read_ttag, singles_probabilities, write_ttag
from uncertainty import RunSeries, budget_from_value, budget_report, budget_to_json, compare, \
    export_run_statistics, load_budget, render_text, run_statistics

logger = logging.getLogger('g2kit.cli')

EXIT_OK = 0
EXIT_WARNINGS = 1
EXIT_ERROR = 2

_VALUE_PAIR = re.compile(r'^\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*$')


def setup_logging(debug: bool = False) -> None:
    directory = log_dir()
    directory.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if debug else getattr(logging, log_level(), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s %(message)s',
        handlers=[
            logging.FileHandler(directory / 'g2kit.log'),
            logging.StreamHandler()
        ]
    )
    if debug:
        logging.getLogger().setLevel(logging.DEBUG)


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open('rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


class RunLoad(NamedTuple):
    """Outcome of loading one budget input on a worker thread"""
    path: Path
    estimate: Optional[AlphaEstimate] = None
    notes: Sequence[str] = ()
    error: Optional[BaseException] = None


def _with_suffix(out: Path, tag: str, suffix: str) -> Path:
    return out.with_name(f"{out.stem}{tag}{suffix}")


class G2Pipeline:
    def __init__(self, config: Optional[PipelineConfig] = None, strict: bool = False):
        """
        Command implementations shared by the CLI and tests

        Args:
            config: numeric defaults (window, coverage factor, geometry, threads)
            strict: treat validation warnings as failures
        """
        self.config = config or PipelineConfig()
        self.strict = strict or self.config.strict
        self.warnings: List[str] = []
        self.inputs: List[Path] = []
        self.outputs: List[Path] = []
        self.seeds: Dict[str, Any] = {}
        self.context = ''

    def warn(self, message: str) -> None:
        logger.warning(message)
        self.warnings.append(message)

    # loading

    def _track_input(self, path: Path, notes: Sequence[str] = ()) -> None:
        self.context = f"--in {path}"
        self.inputs.append(path)
        for note in notes:
            self.warn(note)

    def read_stream(self, path: Path) -> TimeTagStream:
        path = Path(path)
        self._track_input(path)
        stream, notes = self._parse_stream(path)
        for note in notes:
            self.warn(note)
        return stream

    def _parse_stream(self, path: Path) -> Tuple[TimeTagStream, List[str]]:
        """Time-tag file and its loading warnings; leaves the pipeline state untouched"""
        with path.open('rb') as f:
            magic = f.read(len(TTAG_MAGIC))
        if magic == TTAG_MAGIC or path.suffix.lower() == '.ttag':
            return read_ttag(path), []
        header = read_csv_metadata(path)
        if 'resolution_ps' not in header or 'acquisition_time_s' not in header:
            raise UsageError("CSV time-tag input needs '# resolution_ps' and "
                             "'# acquisition_time_s' header lines")
        metadata = RunMetadata(
            excitation_rate_hz=float(header.get('excitation_rate_hz', self.config.excitation_rate_hz)),
            acquisition_time_s=float(header['acquisition_time_s']),
            run_index=int(header.get('run_index', 0)),
        )
        stream = import_csv(path, int(header['resolution_ps']), metadata)
        if stream.sort_performed:
            return stream, [f"{path}: input rows were re-sorted"]
        return stream, []

    def correlate(self, stream: TimeTagStream, channels: Tuple[int, int] = (0, 1),
                  bin_ns: Optional[float] = None, range_ns: Optional[float] = None) -> Chronogram:
        rate = stream.metadata.excitation_rate_hz
        bin_width, (lo, hi) = default_geometry(
            stream.resolution_ps, rate, bin_width_ns=bin_ns or self.config.bin_width_ns,
            range_periods=self.config.range_periods)
        if range_ns is not None:
            half = -(-round(range_ns * 1000 / stream.resolution_ps) // bin_width) * bin_width
            lo, hi = -half, half
        return cross_correlate(stream, channels[0], channels[1], bin_width, (lo, hi),
                               n_workers=self.config.threads)

    def load_chronogram(self, path: Path, channels: Tuple[int, int] = (0, 1)) -> Tuple[Chronogram, Optional[TimeTagStream]]:
        """Chronogram from a chronogram CSV, or correlated from a time-tag file"""
        path = Path(path)
        self._track_input(path)
        ch, stream, notes = self._parse_chronogram(path, channels)
        for note in notes:
            self.warn(note)
        return ch, stream

    def _parse_chronogram(self, path: Path, channels: Tuple[int, int] = (0, 1)) \
            -> Tuple[Chronogram, Optional[TimeTagStream], List[str]]:
        if path.suffix.lower() == '.csv' and is_chronogram_csv(path):
            return import_chronogram(path), None, []
        stream, notes = self._parse_stream(path)
        return self.correlate(stream, channels), stream, notes

    def _write_json(self, data: Dict[str, Any], path: Path) -> Path:
        path.write_text(json.dumps(data, indent=2) + '\n')
        self.outputs.append(path)
        return path

    # commands

    def cmd_simulate(self, out: Path, config_path: Optional[Path] = None, seed: Optional[int] = None,
                     runs: int = 1, reference: bool = False, joint: bool = False,
                     partner_resolution_ps: Optional[int] = None) -> Dict[str, Any]:
        """Simulated TTAG file(s): one per run, or host/partner pairs with joint=True"""
        if config_path is not None:
            self.context = f"--config {config_path}"
            self.inputs.append(config_path)
            sim = load_config(config_path)
        else:
            sim = SimConfig.nv_reference() if reference else SimConfig()
        if seed is not None:
            sim = replace(sim, seed=seed)
        self.seeds = {'seed': sim.seed, 'runs': runs, 'spawn': 'numpy.random.SeedSequence'}

        self.context = f"--out {out}"
        written = []
        if joint:
            children = np.random.SeedSequence(sim.seed).spawn(runs)
            for i, child in enumerate(children):
                host, partner = simulate_joint_run(replace(sim, run_index=i), partner_resolution_ps,
                                                   seed=child)
                tag = f"_{i:02d}" if runs > 1 else ''
                for name, stream in (('host', host), ('partner', partner)):
                    path = _with_suffix(out, f"{tag}_{name}", out.suffix or '.ttag')
                    write_ttag(stream, path)
                    written.append(path)
        elif runs == 1:
            write_ttag(simulate_run(sim), out)
            written.append(out)
        else:
            for i, stream in enumerate(simulate_series(sim, runs, n_workers=self.config.threads)):
                path = _with_suffix(out, f"_{i:02d}", out.suffix or '.ttag')
                write_ttag(stream, path)
                written.append(path)
        self.outputs.extend(written)
        return {'outputs': [str(p) for p in written], 'config': asdict(sim)}

    def cmd_histogram(self, inp: Path, out: Path, bin_ns: Optional[float] = None,
                      range_ns: Optional[float] = None, channels: Tuple[int, int] = (0, 1)) -> Dict[str, Any]:
        stream = self.read_stream(inp)
        ch = self.correlate(stream, channels, bin_ns, range_ns)
        self.context = f"--out {out}"
        export_chronogram(ch, out)
        self.outputs.append(out)
        return {'output': str(out), 'bins': ch.n_bins, 'coincidences': ch.total}

    def cmd_estimate(self, inp: Path, out: Path, window_ns: Optional[float] = None) -> Dict[str, Any]:
        """alpha, windowed counts, window validation and (for time-tag input) low-flux check"""
        window_ns = window_ns or self.config.window_ns
        ch, stream = self.load_chronogram(inp)
        estimate = estimate_alpha(ch, window_ns)
        validation = validate_window(ch, estimate.window)
        result = {
            'input': str(inp),
            'estimate': estimate.as_dict(),
            'validation': validation.as_dict(),
        }
        if estimate.negative:
            self.warn(f"{inp}: negative alpha {estimate.alpha:.4g}")
        for flag in validation.flags:
            self.warn(f"{inp}: secondary peak at {flag.delay_ns:.1f} ns inside the window")
        if stream is not None:
            singles = singles_probabilities(stream)
            report = low_flux_check(singles.get(0, 0.0), singles.get(1, 0.0))
            result['low_flux'] = {'passed': report.passed, 'max_probability': report.max_probability,
                                  'threshold': report.threshold}
            if not report.passed:
                self.warnings.append(f"{inp}: {report.message}")
        self.context = f"--out {out}"
        self._write_json(result, out)
        return result

    def cmd_sweep(self, inp: Path, out: Path, w_min: float = 4.0, w_max: float = 40.0,
                  step: float = 2.0) -> Dict[str, Any]:
        ch, _ = self.load_chronogram(inp)
        self.context = f"--w-min {w_min} --w-max {w_max} --step {step}"
        estimates = window_sweep(ch, sweep_widths(w_min, w_max, step))
        self.context = f"--out {out}"
        export_sweep(estimates, out)
        self.outputs.append(out)
        return {'output': str(out), 'points': len(estimates)}

    def _estimates(self, inputs: Sequence[Path], window_ns: float) -> List[AlphaEstimate]:
        """
        Per-run estimates, loaded on a thread pool.

        Workers only parse and estimate; inputs, warnings and the error context
        are recorded here afterwards in argument order, so a failing file is
        reported under its own path.
        """
        def one(item: Tuple[int, Path]) -> RunLoad:
            index, path = item
            path = Path(path)
            try:
                ch, _, notes = self._parse_chronogram(path)
                estimate = estimate_alpha(ch, window_ns, run_index=index, source=str(path))
                return RunLoad(path, estimate, notes)
            except (G2KitError, OSError) as e:
                return RunLoad(path, error=e)

        workers = max(1, min(self.config.threads, len(inputs)))
        if workers == 1:
            loads = map(one, enumerate(inputs))
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                loads = list(pool.map(one, enumerate(inputs)))

        estimates = []
        for load in loads:
            self._track_input(load.path, load.notes)
            if load.error is not None:
                raise load.error
            estimates.append(load.estimate)
        return estimates

    def cmd_budget(self, inputs: Sequence[Path], out: Path, k: Optional[float] = None,
                   window_ns: Optional[float] = None, label: str = '') -> Dict[str, Any]:
        """Budget JSON at out, text table at <out>.txt, per-run alpha CSV at <out>.runs.csv"""
        k = k or self.config.k
        estimates = self._estimates(inputs, window_ns or self.config.window_ns)
        series = RunSeries.from_estimates(estimates, label=label or out.stem)
        self.context = f"--in ({len(inputs)} runs)"
        budget = budget_report(series, k)
        stats = run_statistics(series)

        self.context = f"--out {out}"
        data = budget_to_json(budget)
        data['runs'] = [e.as_dict() for e in estimates]
        self._write_json(data, out)
        text_path = _with_suffix(out, '', '.txt')
        text_path.write_text(render_text(budget))
        runs_path = _with_suffix(out, '.runs', '.csv')
        export_run_statistics(stats, runs_path)
        self.outputs.extend([text_path, runs_path])
        return data

    def cmd_lifetime(self, inputs: Sequence[Path], out: Path,
                     groups: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        """Fit JSON at out and residual CSV(s) next to it; aggregate over several inputs"""
        if groups and len(groups) != len(inputs):
            raise UsageError("--group needs one label per input")
        fits = []
        for i, path in enumerate(inputs):
            ch, _ = self.load_chronogram(path)
            label = groups[i] if groups else Path(path).stem
            fit = fit_lifetime(ch, label=label)
            tag = f"_residuals_{i:02d}" if len(inputs) > 1 else '_residuals'
            csv_path = _with_suffix(out, tag, '.csv')
            fit_json = _with_suffix(out, f"_fit_{i:02d}", '.json') if len(inputs) > 1 else out
            export_fit(fit, fit_json, csv_path)
            self.outputs.extend([fit_json, csv_path] if len(inputs) > 1 else [csv_path])
            fits.append(fit)

        if len(fits) == 1:
            self.outputs.append(out)
            return fits[0].as_dict()

        summary = aggregate_lifetime(fits)
        result = {
            'fits': [f.as_dict() for f in fits],
            'aggregate': {'mean_ns': summary.mean, 'standard_error_ns': summary.standard_error,
                          'n': summary.n},
        }
        if groups:
            # partners with a single run have no standard error
            paired = [(f, g) for f, g in zip(fits, groups) if list(groups).count(g) >= 2]
            per_group = aggregate_lifetime([f for f, _ in paired], [g for _, g in paired]) if paired else {}
            result['groups'] = {label: {'mean_ns': s.mean, 'standard_error_ns': s.standard_error, 'n': s.n}
                                for label, s in per_group.items()}
        self.context = f"--out {out}"
        self._write_json(result, out)
        return result

    def _budget_arg(self, value: str):
        match = _VALUE_PAIR.match(value)
        if match:
            return budget_from_value(float(match.group(1)), float(match.group(2)), self.config.k, value)
        path = Path(value)
        self.context = f"budget {path}"
        self.inputs.append(path)
        budget = load_budget(path)
        return budget if budget.label else replace(budget, label=path.stem)

    def cmd_compare(self, budget_a: str, budget_b: str, out: Optional[Path] = None) -> Dict[str, Any]:
        """Normalized-error comparison of two budgets (JSON files or 'alpha,U' pairs at config k)"""
        result = compare(self._budget_arg(budget_a), self._budget_arg(budget_b)).as_dict()
        if not result['compatible']:
            self.warnings.append(f"results not compatible (E = {result['normalized_error']:.3f})")
        if out is not None:
            self._write_json(result, out)
        else:
            print(json.dumps(result, indent=2))
        return result

    def cmd_replay(self, manifest: Path) -> Dict[str, Any]:
        """Re-run a command from its manifest and check the outputs are byte-identical"""
        self.context = f"--manifest {manifest}"
        record = json.loads(Path(manifest).read_text())
        argv = record['argv']
        code = run(argv, write_manifest=False)
        if code == EXIT_ERROR:
            raise G2KitError(f"replayed command failed: {' '.join(argv)}")
        mismatches = [o['path'] for o in record['outputs']
                      if not Path(o['path']).exists() or sha256_of(Path(o['path'])) != o['sha256']]
        if mismatches:
            raise G2KitError(f"replay differs for: {', '.join(mismatches)}")
        logger.info(f"Replay of {record['command']} reproduced {len(record['outputs'])} outputs")
        return {'command': record['command'], 'reproduced': True, 'outputs': len(record['outputs'])}

    # manifest

    def manifest(self, command: str, argv: Sequence[str], parameters: Dict[str, Any]) -> Dict[str, Any]:
        return {
            'command': command,
            'argv': list(argv),
            'version': VERSION,
            'created': datetime.now().isoformat(),
            'parameters': parameters,
            'pipeline_config': asdict(self.config),
            'seeds': self.seeds,
            'inputs': [{'path': str(p), 'sha256': sha256_of(p)} for p in self.inputs],
            'outputs': [{'path': str(p), 'sha256': sha256_of(p)} for p in self.outputs],
        }


def _channels(text: str) -> Tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'a,b' channel pair, got {text!r}")
    return a, b


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='Random seed (simulate)')
    common.add_argument('--config', type=Path, help='key=value configuration file')
    common.add_argument('--strict', action='store_true', help='Exit 1 on validation warnings')
    common.add_argument('--out', type=Path, help='Output file')
    common.add_argument('--debug', action='store_true', help='Enable debug logging')
    common.add_argument('--metrics-out', type=Path, help='Write Prometheus textfile metrics here')

    parser = argparse.ArgumentParser(prog='g2kit',
                                     description='Pulsed single-photon source characterization')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', parents=[common], help='Simulate TTAG runs')
    p.add_argument('--runs', type=int, default=1)
    p.add_argument('--reference', action='store_true', help='Use the NV-centre reference configuration')
    p.add_argument('--joint', action='store_true', help='Host + partner interferometers')
    p.add_argument('--partner-resolution-ps', type=int)

    p = sub.add_parser('histogram', parents=[common], help='Build a chronogram CSV')
    p.add_argument('--in', dest='inp', type=Path, required=True)
    p.add_argument('--bin-ns', type=float)
    p.add_argument('--range-ns', type=float, help='Half-range of delays (default 1.5 periods)')
    p.add_argument('--channels', type=_channels, default=(0, 1))

    p = sub.add_parser('estimate', parents=[common], help='Estimate alpha')
    p.add_argument('--in', dest='inp', type=Path, required=True)
    p.add_argument('--window', type=float, help='Coincidence window w (ns)')

    p = sub.add_parser('sweep', parents=[common], help='Alpha versus window width')
    p.add_argument('--in', dest='inp', type=Path, required=True)
    p.add_argument('--w-min', type=float, default=4.0)
    p.add_argument('--w-max', type=float, default=40.0)
    p.add_argument('--step', type=float, default=2.0)

    p = sub.add_parser('budget', parents=[common], help='Uncertainty budget over runs')
    p.add_argument('--in', dest='inputs', type=Path, nargs='+', required=True)
    p.add_argument('--k', type=float)
    p.add_argument('--window', type=float)
    p.add_argument('--label', default='')

    p = sub.add_parser('lifetime', parents=[common], help='Fit emitter lifetime')
    p.add_argument('--in', dest='inputs', type=Path, nargs='+', required=True)
    p.add_argument('--group', nargs='*', help='One group label per input')

    p = sub.add_parser('compare', parents=[common], help='Compare two budgets')
    p.add_argument('--a', required=True, help="Budget JSON or 'alpha,U'")
    p.add_argument('--b', required=True, help="Budget JSON or 'alpha,U'")

    p = sub.add_parser('replay', parents=[common], help='Re-run a command from its manifest')
    p.add_argument('--manifest', type=Path, required=True)
    return parser


def _pipeline_config(args) -> PipelineConfig:
    if args.config is None or args.command == 'simulate':
        return PipelineConfig()
    return from_mapping(PipelineConfig, load_key_values(args.config))


def _dispatch(pipeline: G2Pipeline, args) -> Dict[str, Any]:
    needs_out = args.command not in ('compare', 'replay')
    if needs_out and args.out is None:
        raise UsageError(f"--out is required for {args.command}")

    commands: Dict[str, Callable[[], Dict[str, Any]]] = {
        'simulate': lambda: pipeline.cmd_simulate(args.out, args.config, args.seed, args.runs,
                                                  args.reference, args.joint, args.partner_resolution_ps),
        'histogram': lambda: pipeline.cmd_histogram(args.inp, args.out, args.bin_ns, args.range_ns,
                                                    args.channels),
        'estimate': lambda: pipeline.cmd_estimate(args.inp, args.out, args.window),
        'sweep': lambda: pipeline.cmd_sweep(args.inp, args.out, args.w_min, args.w_max, args.step),
        'budget': lambda: pipeline.cmd_budget(args.inputs, args.out, args.k, args.window, args.label),
        'lifetime': lambda: pipeline.cmd_lifetime(args.inputs, args.out, args.group),
        'compare': lambda: pipeline.cmd_compare(args.a, args.b, args.out),
        'replay': lambda: pipeline.cmd_replay(args.manifest),
    }
    return commands[args.command]()


def run(argv: Sequence[str], write_manifest: bool = True) -> int:
    """Run one command; returns the exit code (0 ok, 1 warnings under --strict, 2 error)"""
    args = build_parser().parse_args(list(argv))
    if args.debug:
        logging.getLogger().setLevel(logging.DEBUG)

    pipeline = None
    try:
        pipeline = G2Pipeline(_pipeline_config(args), strict=args.strict)
        with metrics.timed(args.command):
            _dispatch(pipeline, args)
        if write_manifest and args.out is not None and args.command != 'replay':
            parameters = {key: str(value) if isinstance(value, Path) else value
                          for key, value in vars(args).items()}
            parameters = json.loads(json.dumps(parameters, default=str))
            manifest_path = _with_suffix(args.out, args.out.suffix, '.manifest.json')
            manifest_path.write_text(json.dumps(pipeline.manifest(args.command, argv, parameters),
                                                indent=2) + '\n')
    except (G2KitError, OSError) as e:
        context = pipeline.context if pipeline is not None and pipeline.context else 'arguments'
        logger.error(f"{args.command}: {context}: {e}")
        return getattr(e, 'exit_code', EXIT_ERROR) if isinstance(e, G2KitError) else EXIT_ERROR
    finally:
        if args.metrics_out is not None:
            metrics.write_metrics(args.metrics_out)

    if pipeline.warnings:
        logger.warning(f"{args.command}: {len(pipeline.warnings)} validation warning(s)")
        if pipeline.strict:
            return EXIT_WARNINGS
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function"""
    argv = sys.argv[1:] if argv is None else list(argv)
    setup_logging(debug='--debug' in argv)
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
