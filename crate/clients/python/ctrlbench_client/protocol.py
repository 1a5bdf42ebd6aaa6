import json
import math
import sys

PROTOCOL_VERSION = 1


def _line(obj):
    return json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n"


def _error(message):
    return _line({"type": "error", "message": message})


def _number(msg, key):
    v = msg.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"missing number `{key}`")
    return float(v)


def handle(policy, msg, state):
    """Reply line for one decoded request, or None to stop serving."""
    kind = msg.get("type")
    if kind == "init":
        if msg.get("protocol") != PROTOCOL_VERSION:
            return _error(f"unsupported protocol {msg.get('protocol')!r}, this client speaks {PROTOCOL_VERSION}")
        dt = _number(msg, "dt")
        if not dt > 0:
            return _error("dt must be positive")
        policy.configure(dt)
        policy.reset()
        state["ready"] = True
        return _line({"type": "ready"})
    if kind == "step":
        if not state.get("ready"):
            return _error("step before init")
        u = float(policy(_number(msg, "t"), _number(msg, "r"), _number(msg, "y")))
        if not math.isfinite(u):
            return _error(f"policy returned {u}")
        return _line({"type": "u", "value": u})
    if kind == "reset":
        policy.reset()
        return _line({"type": "ack"})
    if kind == "shutdown":
        return None
    return _error(f"unknown message type {kind!r}")


def serve(policy, stdin=None, stdout=None):
    """Answer bridge requests until shutdown or end of input."""
    stdin = sys.stdin if stdin is None else stdin
    stdout = sys.stdout if stdout is None else stdout
    state = {}
    for raw in stdin:
        raw = raw.strip()
        if not raw:
            continue
        try:
            msg = json.loads(raw)
            if not isinstance(msg, dict):
                raise ValueError("request is not a JSON object")
            reply = handle(policy, msg, state)
        except Exception as exc:  # one bad request must not end the session
            reply = _error(str(exc))
        if reply is None:
            return
        stdout.write(reply)
        stdout.flush()
