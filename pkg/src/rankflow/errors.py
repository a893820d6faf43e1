"""Exception hierarchy shared across rankflow modules."""

from __future__ import annotations


class RankFlowError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(RankFlowError, ValueError):
    pass


class InvalidConfigError(RankFlowError, ValueError):
    pass


class RenderError(RankFlowError):
    """A template referenced a placeholder that was not bound."""

    def __init__(self, placeholder: str, role_name: str = ""):
        self.placeholder = placeholder
        where = f" in {role_name} template" if role_name else ""
        super().__init__(f"unbound placeholder {{{placeholder}}}{where}")


class BackendError(RankFlowError):
    """Any failure reported by a chat-completion backend."""


class BackendUnavailableError(BackendError):
    """Transport failure or rate limiting that outlived the retry budget."""


class BackendRequestError(BackendError):
    """Non-retryable provider rejection (bad request, auth, ...)."""


class EmptyReplyError(BackendError):
    pass


class ContextOverflowError(BackendError):
    def __init__(self, message_length: int, detail: str = ""):
        self.message_length = message_length
        msg = f"context overflow (request length {message_length} chars)"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class ScriptMissError(BackendError):
    """The scripted backend has no canned reply for a request digest."""

    def __init__(self, digest: str):
        self.digest = digest
        super().__init__(f"no scripted reply for request digest {digest}")


class RoleFailureError(RankFlowError):
    def __init__(self, role_name: str, reason: str, query_id: str | None = None):
        self.role_name = role_name
        self.query_id = query_id
        qid = f" (query {query_id})" if query_id is not None else ""
        super().__init__(f"{role_name} failed{qid}: {reason}")


class UnparseableReplyError(RankFlowError):
    pass


class InternalInvariantError(RankFlowError):
    pass


class EmptyIntersectionError(RankFlowError):
    pass


class IngestionError(RankFlowError):
    def __init__(self, message: str, offenders: list[str] | None = None):
        self.offenders = list(offenders or [])
        if self.offenders:
            shown = ", ".join(self.offenders[:20])
            more = f" (+{len(self.offenders) - 20} more)" if len(self.offenders) > 20 else ""
            message = f"{message}: {shown}{more}"
        super().__init__(message)


class CacheUnavailableError(RankFlowError):
    pass
