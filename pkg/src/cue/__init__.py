"""cue: container-based user environments.

Each user of a shared machine gets an isolated, customizable view of the
whole system through a two-layer overlay: the administrator's base tree
below, the user's private delta above.  The package also provides the
transactional base update (merge a tested sandbox delta down into the
base) and cluster deployment of user layers over shared storage.
"""

__version__ = "0.1.0"
