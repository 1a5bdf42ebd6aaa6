import importlib
import math


class Policy:
    """Maps (t, r, y) to a control command.

    `dt` is set from the bridge's init message before the first step.
    """

    name = "policy"
    dt = None

    def configure(self, dt):
        self.dt = dt

    def reset(self):
        pass

    def __call__(self, t, r, y):
        raise NotImplementedError


class PDPolicy(Policy):
    """Parallel PD with the derivative taken on -y.

    The derivative is a backward difference at the controller rate passed
    through a first-order filter with time constant `tau`. With the same
    `tau` this is the built-in PID law with Ki = Kaw = 0, operation for
    operation; `tau=0` gives the plain finite difference.
    """

    name = "pd"

    def __init__(self, kp=6.0, kd=4.0, tau=0.02, reverse=False):
        if tau < 0 or not math.isfinite(tau):
            raise ValueError("tau must be finite and >= 0")
        self.kp, self.kd, self.tau = kp, kd, tau
        self.sign = -1.0 if reverse else 1.0
        self.reset()

    def reset(self):
        self.prev = None
        self.d_filt = 0.0

    def __call__(self, t, r, y):
        dt = self.dt
        e = r - y
        signal = -y
        prev = signal if self.prev is None else self.prev
        raw = (signal - prev) / dt
        self.prev = signal
        alpha = dt / (self.tau + dt)
        self.d_filt += alpha * (raw - self.d_filt)
        return self.sign * (self.kp * e + self.kd * self.d_filt)


def load_policy(target, **kwargs):
    """Resolve "package.module:attr" into a policy.

    `attr` may be a Policy instance, a Policy subclass (called with
    `kwargs`), a factory (called with `kwargs`, which must then be given),
    or a plain callable `(t, r, y) -> u`. This is the hook for mounting a
    trained actor network: wrap its forward pass in a Policy subclass.
    """
    module_name, sep, attr = target.partition(":")
    if not sep or not module_name or not attr:
        raise ValueError(f"expected module:attr, got {target!r}")
    obj = importlib.import_module(module_name)
    for part in attr.split("."):
        obj = getattr(obj, part)
    if isinstance(obj, type) or kwargs:
        obj = obj(**kwargs)
    if isinstance(obj, Policy):
        return obj
    if callable(obj):
        return _FunctionPolicy(obj, getattr(obj, "__name__", attr))
    raise TypeError(f"{target} did not produce a policy")


class _FunctionPolicy(Policy):
    def __init__(self, fn, name):
        self.fn = fn
        self.name = name

    def reset(self):
        hook = getattr(self.fn, "reset", None)
        if callable(hook):
            hook()

    def __call__(self, t, r, y):
        return self.fn(t, r, y)
