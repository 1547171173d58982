import yaml

from ebdsfilter.config import GCONFIG
from ebdsfilter.runconfig import RunConfig

print("# process settings (EBDSFILTER_CONF_FILE)")
print(yaml.safe_dump(GCONFIG.settings, indent=2))
print("# run configuration defaults (--config / --preset / --set)")
print(yaml.safe_dump(RunConfig().resolved(), indent=2, sort_keys=False))
