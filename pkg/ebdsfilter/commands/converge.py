import os

from ebdsfilter.commands.command_base import CommandBase
from ebdsfilter.evaluate import emit_error_csv, emit_gnuplot
from ebdsfilter.runconfig import prepare_output_dir, write_run_manifest
from ebdsfilter.store import write_yaml
from ebdsfilter.sweep import evaluation_sequences, run_sweep, tabulate


class ConvergeCmd(CommandBase):
    name = "converge"
    help_message = "sweep N (and seeds) and fit the convergence slope"

    def __init__(self, options):
        super().__init__(options)
        self.workers = options.workers
        self.output_dir = None
        self.table = None

    @classmethod
    def _add_arguments(cls, parser):
        cls._add_runconfig_options(parser)
        parser.add_argument(
            "--workers",
            type=int,
            default=None,
            help="worker processes (default: EBDS_WORKERS or 1)",
        )

    def _call(self):
        cfg = self.load_config()
        self.output_dir = prepare_output_dir(cfg.output_dir)
        sequences = evaluation_sequences(cfg, cfg.bundle())
        reports = run_sweep(cfg, sequences, self.workers)
        self.table = tabulate(cfg, reports)
        cells = sorted(reports, key=lambda c: (c[1] is not None, c[1], c[0]))
        outputs = {
            "convergence": emit_error_csv(
                self.table, os.path.join(self.output_dir, "convergence.csv")
            ),
            "per_time": emit_error_csv(
                [reports[cell] for cell in cells],
                os.path.join(self.output_dir, "per_time.csv"),
            ),
            "gnuplot": emit_gnuplot(
                self.table, os.path.join(self.output_dir, "convergence.dat")
            ),
        }
        summary = os.path.join(self.output_dir, "summary.yaml")
        write_yaml(self.table.to_dict(), summary)
        outputs["summary"] = summary
        write_run_manifest(cfg, self.output_dir, self.name, outputs)

    def _render_dict(self):
        return {"output_dir": self.output_dir, **self.table.to_dict()}

    def _render_console(self):
        lines = [f"{'N':>6} {'error':>14}"]
        rows = zip(self.table.N_values, self.table.final_errors)
        lines += [f"{N:>6} {err:>14.6g}" for N, err in rows]
        slope = "n/a" if self.table.slope is None else f"{self.table.slope:.4f}"
        lines.append(f"slope: {slope}")
        return "\n".join(lines)
