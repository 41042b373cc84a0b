
class MqttzError(Exception):
    """
    Base class for all mqttz errors.

    :var string code: short error code, eg 'MALFORMED', 'NO_KEY'
    """
    code = 'INTERNAL'

    def __init__(self, message='', code=None):
        if code is not None:
            self.code = code
        super(MqttzError, self).__init__(message or self.code)


class MalformedPacket(MqttzError, ValueError):
    code = 'MALFORMED'


class OversizePacket(MqttzError, ValueError):
    code = 'OVERSIZE'


class BadPadding(MqttzError, ValueError):
    code = 'BAD_PADDING'


class UnwrapFailed(MqttzError, ValueError):
    code = 'UNWRAP_FAILED'


class MissingSeed(MqttzError, ValueError):
    code = 'MISSING_SEED'


class NoKey(MqttzError, KeyError):
    code = 'NO_KEY'

    def __init__(self, client_id, message=''):
        self.client_id = client_id
        super(NoKey, self).__init__(message or 'no key for client %r' % client_id)

    def __str__(self):
        # KeyError would repr() the message otherwise
        return self.args[0]


class UnsealFailed(NoKey):
    """
    A sealed record exists but does not authenticate. Callers that only care about
    key availability treat it as a missing key.
    """
    code = 'UNSEAL_FAILED'


class RecordNotFound(MqttzError, KeyError):
    code = 'NOT_FOUND'

    def __str__(self):
        return self.args[0]


class StoreIOError(MqttzError, OSError):
    code = 'STORE_IO'


class Unauthorized(MqttzError, PermissionError):
    code = 'UNAUTHORIZED'


class AclParseError(MqttzError, ValueError):
    code = 'PARSE_ERROR'

    def __init__(self, lineno, message):
        self.lineno = lineno
        super(AclParseError, self).__init__('line %d: %s' % (lineno, message))


class HandshakeRejected(MqttzError):
    code = 'HANDSHAKE_REJECTED'

    def __init__(self, error_code, message=''):
        self.error_code = error_code
        super(HandshakeRejected, self).__init__(message or 'broker replied ERROR(%d)' % error_code)


class AckMismatch(MqttzError):
    code = 'ACK_MISMATCH'


class MessageLoss(MqttzError):
    code = 'LOSS'


class EmptySamples(MqttzError, ValueError):
    code = 'EMPTY'


# Wire codes carried by ERROR packets
ERROR_UNAUTHORIZED = 1
ERROR_MALFORMED = 2
ERROR_NO_KEY = 3
ERROR_INTERNAL = 4

ERROR_NAMES = {
    ERROR_UNAUTHORIZED: 'UNAUTHORIZED',
    ERROR_MALFORMED: 'MALFORMED',
    ERROR_NO_KEY: 'NO_KEY',
    ERROR_INTERNAL: 'INTERNAL',
}


def wire_code(exc):
    """
    Map an exception to the 1-byte code of an ERROR packet.

    :param Exception exc: error raised while serving a packet
    :return: int in {1, 2, 3, 4}
    """
    if isinstance(exc, Unauthorized):
        return ERROR_UNAUTHORIZED
    if isinstance(exc, (MalformedPacket, OversizePacket)):
        return ERROR_MALFORMED
    if isinstance(exc, NoKey):
        return ERROR_NO_KEY
    return ERROR_INTERNAL
