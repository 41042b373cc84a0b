"""
Access control lists in a minimal mosquitto-compatible format::

    # comment
    user alice
    topic write hospital/floor1/alice/ecg
    topic read hospital/#
    user bob
    topic hospital/floor1/bob/ecg

Comments are whole lines starting with `#`. A topic line without a permission word
grants readwrite. `#` is only allowed as the last full segment of a pattern and matches
the parent topic and anything below it. Anything not granted is denied.
"""

from collections import namedtuple

from mqttz.MqttzErrors import AclParseError, MalformedPacket
from mqttz.MqttzProtocol import validate_client_id

READ = 'read'
WRITE = 'write'
READWRITE = 'readwrite'
PERMISSIONS = (READ, WRITE, READWRITE)

AclEntry = namedtuple('AclEntry', ['pattern', 'permission'])


def _check_pattern(pattern):
    segments = pattern.split('/')
    if any(seg == '' for seg in segments):
        return 'empty segment in pattern %r' % pattern
    if '+' in pattern:
        return 'single-level wildcard is not supported: %r' % pattern
    for i, seg in enumerate(segments):
        if '#' in seg and (seg != '#' or i != len(segments) - 1):
            return "'#' must be the last full segment: %r" % pattern
    return None


def pattern_matches(pattern, topic):
    """
    :param string pattern: ACL pattern, optionally ending in '/#' (or just '#')
    :param string topic: concrete topic
    :return: bool
    """
    if pattern == '#':
        return True
    if pattern.endswith('/#'):
        prefix = pattern[:-2]
        return topic == prefix or topic.startswith(prefix + '/')
    return pattern == topic


def _covers(permission, action):
    return permission == READWRITE or permission == action


class AclTable(object):
    """
    Per-client topic permissions. Lookups are read-only; a reload swaps the whole table.

    :var dict entries: client id -> list of AclEntry in file order
    :var string/NoneType source: file the table was loaded from
    """

    def __init__(self, entries=None, source=None):
        self.entries = dict(entries or {})
        self.source = source

    def __len__(self):
        return len(self.entries)

    def clients(self):
        return sorted(self.entries)

    def has_client(self, client_id):
        return bool(self.entries.get(client_id))

    def add(self, client_id, pattern, permission=READWRITE):
        if permission not in PERMISSIONS:
            raise ValueError('unknown permission %r' % permission)
        problem = _check_pattern(pattern)
        if problem:
            raise ValueError(problem)
        self.entries.setdefault(client_id, []).append(AclEntry(pattern, permission))

    def authorize(self, client_id, topic, action):
        """
        :param string client_id: requesting client
        :param string topic: concrete topic
        :param string action: 'read' or 'write'
        :return: bool -- True iff some entry for the client covers (topic, action)
        """
        if action not in (READ, WRITE):
            raise ValueError('action must be read or write, got %r' % action)
        for entry in self.entries.get(client_id, ()):
            if _covers(entry.permission, action) and pattern_matches(entry.pattern, topic):
                return True
        return False

    def __repr__(self):
        n = sum(len(v) for v in self.entries.values())
        return 'AclTable(%d clients, %d entries)' % (len(self.entries), n)


def authorize(acl, client_id, topic, action):
    """Module-level form of `AclTable.authorize`; an empty table denies everything."""
    return acl.authorize(client_id, topic, action)


def parse_acl(text, source=None):
    """
    Parse ACL text. Later stanzas for the same client append to its entries.

    :param string text: file contents
    :param string/NoneType source: name recorded on the table
    :return: AclTable
    :raises AclParseError: with the 1-based line number of the first bad line
    """
    acl = AclTable(source=source)
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        words = line.split()
        if words[0] == 'user':
            if len(words) != 2:
                raise AclParseError(lineno, "expected 'user <client_id>'")
            try:
                current = validate_client_id(words[1])
            except MalformedPacket as e:
                raise AclParseError(lineno, str(e))
            acl.entries.setdefault(current, [])
        elif words[0] == 'topic':
            if current is None:
                raise AclParseError(lineno, "'topic' before any 'user' line")
            if len(words) == 2:
                permission, pattern = READWRITE, words[1]
            elif len(words) == 3 and words[1] in PERMISSIONS:
                permission, pattern = words[1], words[2]
            else:
                raise AclParseError(lineno, "expected 'topic [read|write|readwrite] <pattern>'")
            problem = _check_pattern(pattern)
            if problem:
                raise AclParseError(lineno, problem)
            acl.entries[current].append(AclEntry(pattern, permission))
        else:
            raise AclParseError(lineno, 'unknown directive %r' % words[0])
    return acl


def load_acl(path):
    """
    Load an ACL file (UTF-8).

    :param string path: file path
    :return: AclTable
    :raises AclParseError: on a grammar error
    :raises OSError: if the file cannot be read
    """
    with open(path, 'r', encoding='utf-8') as f:
        return parse_acl(f.read(), source=path)
