from collections import OrderedDict


class LruKeyCache(object):
    """
    In-memory LRU map ClientId -> key, the trusted application's heap cache.

    Recency order is total: the first entry is always the least recently used, so the
    eviction victim is never ambiguous. Persisting evicted entries is the caller's job
    (see `TrustedContext.cache_put`).

    :var int capacity: maximum number of entries
    :var int hits: lookups served from memory
    :var int misses: lookups not found in memory
    :var int evictions: entries pushed out by inserts
    """

    def __init__(self, capacity):
        """
        :param int capacity: positive entry count
        :raises ValueError: if capacity is not a positive integer
        """
        if int(capacity) != capacity or capacity < 1:
            raise ValueError('cache capacity must be a positive integer, got %r' % (capacity,))
        self.capacity = int(capacity)
        self._entries = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def __len__(self):
        return len(self._entries)

    def __contains__(self, client_id):
        return client_id in self._entries

    def lookup(self, client_id):
        """
        Count a lookup; on a hit promote the entry to most recent.

        :return: bytes key, or None on a miss
        """
        key = self._entries.get(client_id)
        if key is None:
            self.misses += 1
            return None
        self._entries.move_to_end(client_id)
        self.hits += 1
        return key

    def victim_for(self, client_id):
        """
        Which entry an insert of `client_id` would evict, without changing anything.

        :return: (client_id, key) tuple or None
        """
        if client_id in self._entries or len(self._entries) < self.capacity:
            return None
        return next(iter(self._entries.items()))

    def insert(self, client_id, key):
        """
        Insert or overwrite, making `client_id` most recent.

        :return: evicted (client_id, key) tuple or None
        """
        if client_id in self._entries:
            self._entries[client_id] = key
            self._entries.move_to_end(client_id)
            return None
        self._entries[client_id] = key
        if len(self._entries) > self.capacity:
            self.evictions += 1
            return self._entries.popitem(last=False)
        return None

    def remove(self, client_id):
        return self._entries.pop(client_id, None)

    def ids(self):
        """Cached ids, least recently used first."""
        return list(self._entries.keys())

    def drain(self):
        """Empty the cache, returning all (client_id, key) pairs LRU first."""
        items = list(self._entries.items())
        self._entries.clear()
        return items

    def reset_counters(self):
        self.hits = self.misses = self.evictions = 0

    def stats(self):
        return {'hits': self.hits, 'misses': self.misses, 'evictions': self.evictions,
                'size': len(self._entries), 'capacity': self.capacity}
