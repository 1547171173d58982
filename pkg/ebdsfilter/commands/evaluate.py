import os

from ebdsfilter.commands.command_base import CommandBase
from ebdsfilter.evaluate import PipelineEvaluator, emit_error_csv, l2linf_error
from ebdsfilter.runconfig import prepare_output_dir, write_run_manifest
from ebdsfilter.store import load_pipeline
from ebdsfilter.sweep import build_reference, evaluation_sequences


class EvaluateCmd(CommandBase):
    name = "evaluate"
    help_message = "evaluate a persisted pipeline against the reference filter"

    def __init__(self, options):
        super().__init__(options)
        self.pipeline_dir = options.pipeline
        self.output_dir = None
        self.report = None

    @classmethod
    def _add_arguments(cls, parser):
        cls._add_runconfig_options(parser)
        parser.add_argument("pipeline", help="directory holding pipeline.yaml")

    def _call(self):
        cfg = self.load_config()
        pipeline = load_pipeline(self.pipeline_dir)
        bundle = (pipeline.model, pipeline.obs, pipeline.init)
        self.report = l2linf_error(
            PipelineEvaluator(pipeline),
            build_reference(cfg, bundle),
            evaluation_sequences(cfg, bundle, pipeline.time),
            cfg.eval_grid(),
            pipeline.time,
            normalize=cfg.evaluation.normalize,
            instance_seed=pipeline.seed,
        )
        self.output_dir = prepare_output_dir(cfg.output_dir)
        path = emit_error_csv(self.report, os.path.join(self.output_dir, "errors.csv"))
        outputs = {"errors": path, "pipeline": self.pipeline_dir}
        write_run_manifest(cfg, self.output_dir, self.name, outputs)

    def _render_dict(self):
        return {
            "output_dir": self.output_dir,
            "Me": self.report.Me,
            "final_error": self.report.final_error,
            "max_error": max(self.report.per_time.values()),
        }

    def _render_console(self):
        return "\n".join(
            [
                f"Final-time error: {self.report.final_error:.6g} "
                f"(Me={self.report.Me})",
                f"Max error: {max(self.report.per_time.values()):.6g}",
            ]
        )
