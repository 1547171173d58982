import logging
import os

from ebdsfilter.commands.command_base import CommandBase
from ebdsfilter.ebds import train_pipeline
from ebdsfilter.exception import ConfigError
from ebdsfilter.runconfig import prepare_output_dir, write_run_manifest
from ebdsfilter.store import PipelineWriter, load_networks, read_manifest

logger = logging.getLogger(__name__)


class TrainCmd(CommandBase):
    name = "train"
    help_message = "train an energy-based deep splitting pipeline"

    def __init__(self, options):
        super().__init__(options)
        self.resume = options.resume
        self.output_dir = None
        self.trained = 0
        self.skipped = 0
        self.losses = {}

    @classmethod
    def _add_arguments(cls, parser):
        cls._add_runconfig_options(parser)
        parser.add_argument(
            "--resume",
            action="store_true",
            default=False,
            help="reload networks already persisted in output_dir and skip them",
        )

    def _resumed(self, cfg, pipeline_dir):
        manifest = read_manifest(pipeline_dir)
        expected = {
            "time": cfg.time_grid().to_dict(),
            "seed": cfg.seeds[0],
            "model": cfg.model,
        }
        found = {key: manifest.get(key) for key in expected}
        if found != expected:
            raise ConfigError(
                "persisted pipeline does not match the run config",
                {"expected": expected, "found": found},
            )
        return manifest, load_networks(pipeline_dir, manifest)

    def _call(self):
        cfg = self.load_config()
        model, obs, init = cfg.bundle()
        pipeline_dir = os.path.join(cfg.output_dir, "pipeline")
        resume = {}
        writer = None
        if self.resume:
            self.output_dir = cfg.output_dir
            manifest, resume = self._resumed(cfg, pipeline_dir)
            writer = PipelineWriter(pipeline_dir)
            writer.entries = {(e["k"], e["n"]): e for e in manifest["networks"]}
        else:
            self.output_dir = prepare_output_dir(cfg.output_dir)
            writer = PipelineWriter(pipeline_dir)
        self.skipped = len(resume)

        def persist(pipeline, index):
            writer(pipeline, index)
            self.trained += 1

        pipeline = train_pipeline(
            model,
            obs,
            init,
            cfg.time_grid(),
            cfg.train,
            cfg.eval_grid(),
            seed=cfg.seeds[0],
            model_name=cfg.model,
            resume=resume,
            callback=persist,
        )
        writer.write_manifest(pipeline)
        self.losses = {
            f"{k},{n}": net.history.get("final_validation_loss")
            for (k, n), net in sorted(pipeline.networks.items())
        }
        write_run_manifest(
            cfg,
            self.output_dir,
            self.name,
            {"pipeline": pipeline_dir, "networks": len(pipeline.networks)},
        )

    def _render_dict(self):
        return {
            "output_dir": self.output_dir,
            "trained": self.trained,
            "skipped": self.skipped,
            "validation_losses": self.losses,
        }

    def _render_console(self):
        return (
            f"Trained {self.trained} networks ({self.skipped} resumed) "
            f"into {self.output_dir}"
        )
