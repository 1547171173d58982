import ebdsfilter
from ebdsfilter.commands.command_base import CommandBase


class VersionCmd(CommandBase):
    name = "version"
    help_message = "show versions"

    def __init__(self, options):
        super().__init__(options)
        self.version = None
        self.git_sha = None

    @classmethod
    def _add_arguments(cls, parser):
        pass

    def _call(self):
        self.version = ebdsfilter.__version__
        self.git_sha = ebdsfilter.get_git_sha()

    def _render_dict(self):
        return {"version": self.version, "git-sha": self.git_sha}

    def _render_console(self):
        return "\n".join([f"Version: {self.version}", f"Git-sha: {self.git_sha}"])
