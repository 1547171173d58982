import os

from ebdsfilter.commands.command_base import CommandBase
from ebdsfilter.runconfig import prepare_output_dir, write_run_manifest
from ebdsfilter.simulate import sample_observation_sequences
from ebdsfilter.store import write_observations


class SimulateCmd(CommandBase):
    name = "simulate"
    help_message = "simulate observation sequences and write them as csv"

    def __init__(self, options):
        super().__init__(options)
        self.files = []
        self.output_dir = None

    @classmethod
    def _add_arguments(cls, parser):
        cls._add_runconfig_options(parser)

    def _call(self):
        cfg = self.load_config()
        model, obs, init = cfg.bundle()
        time = cfg.time_grid()
        sequences = sample_observation_sequences(
            model,
            obs,
            init,
            time,
            cfg.simulate.count,
            substeps=cfg.simulate.substeps,
            seed=cfg.simulate.seed,
        )
        self.output_dir = prepare_output_dir(cfg.output_dir)
        self.files = write_observations(
            sequences, os.path.join(self.output_dir, "observations"), time
        )
        outputs = {"observations": self.files}
        write_run_manifest(cfg, self.output_dir, self.name, outputs)

    def _render_dict(self):
        return {"output_dir": self.output_dir, "files": self.files}

    def _render_console(self):
        return f"Wrote {len(self.files)} observation sequences to {self.output_dir}"
