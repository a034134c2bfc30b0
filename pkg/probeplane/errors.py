"""
Exception hierarchy. Every error carries a stable numeric `code`, which is
what travels in control-channel ERROR messages and what the CLI prints.
"""
from typing import Optional


class ProbePlaneError(Exception):
    code = 1

    def __init__(self, detail: str = ""):
        super().__init__(detail or self.__class__.__name__)
        self.detail = detail or self.__class__.__name__


# ---------------- pipeline -----------------

class PipelineError(ProbePlaneError):
    code = 100


class NoSuchTable(PipelineError):
    code = 101


class KeyWidthMismatch(PipelineError):
    code = 102


class DuplicateTableId(PipelineError):
    code = 103


class InvalidPosition(PipelineError):
    code = 104


class DuplicateEntry(PipelineError):
    code = 105


class NoSuchEntry(PipelineError):
    code = 106


class DanglingActionPtr(PipelineError):
    code = 107


class SlotInUse(PipelineError):
    code = 108


class NoSuchSlot(PipelineError):
    code = 109


class BlockNotLoaded(PipelineError):
    code = 110


class MalformedPacket(PipelineError):
    code = 111


class StageLimitExceeded(PipelineError):
    code = 112


class ConfigError(PipelineError):
    code = 113


# ---------------- instruction vm -----------------

class ValidationFailed(ProbePlaneError):
    code = 200

    def __init__(self, detail: str = "", index: Optional[int] = None):
        if index is not None:
            detail = f"{detail} (instruction {index})"
        super().__init__(detail)
        self.index = index


class BackwardBranch(ValidationFailed):
    code = 201


class UndeclaredResource(ValidationFailed):
    code = 202


class PacketWriteInPassiveMode(ValidationFailed):
    code = 203


class BlockTooLong(ValidationFailed):
    code = 204


class BadOperand(ValidationFailed):
    code = 205


class ExecutionError(ProbePlaneError):
    code = 210


class UnallocatedResource(ExecutionError):
    code = 211


class PacketFieldOnTimerContext(ExecutionError):
    code = 212


class AssemblyError(ProbePlaneError):
    code = 220


# ---------------- resource pool -----------------

class PoolError(ProbePlaneError):
    code = 300


class PoolExhausted(PoolError):
    code = 301


class HandleInUse(PoolError):
    code = 302


class NoSuchHandle(PoolError):
    code = 303


class TableFull(PoolError):
    code = 304


class NoSuchTimer(PoolError):
    code = 305


class ActionNeedsPacket(PoolError):
    code = 306


# ---------------- probes -----------------

class ProbeError(ProbePlaneError):
    code = 400


class IncompatibleAttachPoint(ProbeError):
    code = 401


class NoCoveringBehavior(ProbeError):
    code = 402


class CommitFailed(ProbeError):
    code = 403

    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"step {step} failed: {cause}")
        self.step = step
        self.cause = cause


class NoSuchProbe(ProbeError):
    code = 404


class HasSubscribers(ProbeError):
    code = 405


class AdmissionRejected(ProbeError):
    code = 406

    def __init__(self, estimate: float, floor: float, device: str = "", candidates=()):
        where = f" on {device}" if device else ""
        super().__init__(f"estimate {estimate:.0f} pps below floor {floor:.0f} pps{where}")
        self.estimate = estimate
        self.floor = floor
        self.device = device
        self.candidates = tuple(candidates)


class ProbeSpecError(ProbeError):
    code = 407


# ---------------- control channel -----------------

class CodecError(ProbePlaneError):
    code = 500


class Truncated(CodecError):
    code = 501


class BadVersion(CodecError):
    code = 502


class BadLength(CodecError):
    code = 503


class UnknownType(CodecError):
    code = 504

    def __init__(self, msg_type: int, xid: int = 0):
        super().__init__(f"unknown message type {msg_type}")
        self.msg_type = msg_type
        self.xid = xid


class SessionClosed(ProbePlaneError):
    code = 510


class XidTimeout(ProbePlaneError):
    code = 511


class RemoteError(ProbePlaneError):
    """An ERROR reply received from a device, re-raised on the controller."""
    code = 520

    def __init__(self, remote_code: int, detail: str):
        super().__init__(f"[{remote_code}] {detail}")
        self.remote_code = remote_code
        self.remote_detail = detail


# ---------------- controller -----------------

class ControllerError(ProbePlaneError):
    code = 600


class UnresolvedSelector(ControllerError):
    code = 601


class UnsupportedKind(ControllerError):
    code = 602


class DeployFailed(ControllerError):
    code = 603

    def __init__(self, device: str, cause: BaseException):
        super().__init__(f"deploy failed on {device}: {cause}")
        self.device = device
        self.cause = cause


class NoSuchQuery(ControllerError):
    code = 604


class QuerySpecError(ControllerError):
    code = 605


# ---------------- harness / cli -----------------

class ScriptError(ProbePlaneError):
    code = 700


class SeedMismatch(ProbePlaneError):
    code = 701


class ParseError(ProbePlaneError):
    code = 800

    def __init__(self, line: int, hint: str):
        super().__init__(f"line {line}: {hint}")
        self.line = line
        self.hint = hint


ERRORS_BY_CODE = {}


def _index(cls):
    ERRORS_BY_CODE.setdefault(cls.code, cls)
    for sub in cls.__subclasses__():
        _index(sub)


_index(ProbePlaneError)
