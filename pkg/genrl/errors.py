"""
Exception types raised across the package. Each carries the CLI exit code
the pipeline maps it to.
"""


class GenRLError(Exception):
    """Base error; `exit_code` is what main.py exits with."""

    exit_code = 1


class ConfigError(GenRLError):
    exit_code = 2


class DatasetFormatError(GenRLError):
    exit_code = 2


class UnknownPromptError(GenRLError):
    exit_code = 2

    def __init__(self, prompt, known):
        self.prompt = prompt
        self.known = sorted(known)
        super().__init__(f"Unknown prompt '{prompt}'. Known prompts: {', '.join(self.known)}")


class StageOrderError(GenRLError):
    exit_code = 3

    def __init__(self, missing_stage: str, path: str = ""):
        self.missing_stage = missing_stage
        self.path = path
        where = f" (expected at {path})" if path else ""
        super().__init__(f"Missing prerequisite stage '{missing_stage}'{where}")


class CalibrationMissingError(GenRLError):
    exit_code = 4

    def __init__(self, task: str = ""):
        self.task = task
        what = f" for task '{task}'" if task else ""
        super().__init__(f"No normalization anchors{what}; run `python main.py calibrate-anchors` first")


class NumericsError(GenRLError):
    exit_code = 1
