"""Node participation states."""

ACTIVE = "active"
AWAIT_CONFIG = "await-config"
EPOCH_CHANGE = "epoch-change"
RECOVERING = "recovering"


def node_identity(i: int) -> str:
    return f"node-{i}"
