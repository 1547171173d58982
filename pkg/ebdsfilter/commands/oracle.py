import os

import numpy as np

from ebdsfilter.commands.command_base import CommandBase
from ebdsfilter.exception import ConfigError
from ebdsfilter.reference import GaussianBelief, kalman_density, kalman_predict
from ebdsfilter.runconfig import OracleMode, prepare_output_dir, write_run_manifest
from ebdsfilter.simulate import TimeGrid
from ebdsfilter.split_quad import quad_filter_batch, standalone_fokker_planck
from ebdsfilter.store import read_observation_dir, write_densities


class OracleCmd(CommandBase):
    name = "oracle"
    help_message = "run the quadrature oracle (filter or standalone Fokker-Planck)"

    def __init__(self, options):
        super().__init__(options)
        self.files = []
        self.output_dir = None
        self.summary = {}

    @classmethod
    def _add_arguments(cls, parser):
        cls._add_runconfig_options(parser)

    def _call(self):
        cfg = self.load_config()
        if cfg.oracle.mode == OracleMode.STANDALONE:
            self._standalone(cfg)
        else:
            self._filter(cfg)
        outputs = {"densities": self.files, **self.summary}
        write_run_manifest(cfg, self.output_dir, self.name, outputs)

    def _standalone(self, cfg):
        model, _, init = cfg.bundle()
        grid, time = cfg.eval_grid(), cfg.time_grid()
        terminal = standalone_fokker_planck(
            model, init, grid, time.N, time.T, cfg.gh_order
        )
        self.output_dir = prepare_output_dir(cfg.output_dir)
        self.files = write_densities(
            {(0, time.N): terminal.values},
            grid,
            TimeGrid(time.T, 1, time.N),
            self.output_dir,
            long_format=True,
            name="terminal",
        )
        self.summary = {"T": time.T, "N": time.N}
        if model.affine is not None and init.gaussian is not None:
            affine = model.affine
            exact = kalman_predict(
                GaussianBelief(*init.gaussian),
                affine.offset,
                time.T,
                affine.sigma,
                affine.slope,
            )
            self.summary["exact_mean"] = exact.mean
            self.summary["exact_variance"] = exact.variance
            self.summary["sup_error"] = float(
                np.max(np.abs(terminal.values - kalman_density(exact, grid).values))
            )

    def _filter(self, cfg):
        if not cfg.oracle.observations:
            raise ConfigError(
                "oracle filter mode needs oracle.observations "
                "(a directory of obs_*.csv)"
            )
        sequences = read_observation_dir(cfg.oracle.observations)
        model, obs, init = cfg.bundle()
        grid, time = cfg.eval_grid(), cfg.time_grid()
        run = quad_filter_batch(
            model,
            obs,
            init,
            grid,
            time,
            sequences,
            cfg.gh_order,
            cfg.oracle.normalized_updates,
        )
        self.output_dir = prepare_output_dir(cfg.output_dir)
        for s in range(len(sequences)):
            self.files += write_densities(
                {index: values[s] for index, values in run.items()},
                grid,
                time,
                os.path.join(self.output_dir, f"seq_{s:04d}"),
                long_format=cfg.oracle.long_format,
            )
        self.summary = {"sequences": len(sequences)}

    def _render_dict(self):
        return {"output_dir": self.output_dir, "files": len(self.files), **self.summary}

    def _render_console(self):
        lines = [f"Wrote {len(self.files)} density files to {self.output_dir}"]
        if "sup_error" in self.summary:
            lines.append(f"Sup error vs exact density: {self.summary['sup_error']:.6g}")
        return "\n".join(lines)
