"""Run configuration: a flat record with a line-oriented ``key = value`` text form."""

from dataclasses import dataclass, fields, replace

from .errors import ParameterError

CHOICES = {
    "method": ("sm", "ssm", "fdssm", "dsm", "lcs", "lcss"),
    "sde": ("none", "ve", "subvp"),
    "dataset": ("checkerboard", "gmm"),
    "mode": ("auto", "energy", "score"),
    "activation": ("tanh", "softplus"),
    "optimizer": ("sgd", "adam"),
}


@dataclass(frozen=True)
class RunConfig:
    method: str = "lcss"
    sde: str = "none"
    dataset: str = "checkerboard"
    seed: int = 0
    iters: int = 20000
    batch: int = 1000
    optimizer: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.0
    sigma: float = 0.1
    epsilon: float = 0.1
    gamma: float = 1.0
    steps: int = 1000
    langevin_eps: float = 0.1
    final_noise: bool = True
    n_samples: int = 10000
    hidden: str = "300,300"
    activation: str = "tanh"
    mode: str = "auto"
    scale_by_sigma: bool = False
    bins: int = 64
    checkpoint_every: int = 1000
    bench_steps: int = 500
    bench_batch: int = 10000
    methods: str = "ssm,fdssm,dsm,lcss"
    out: str = "runs"
    checkpoint: str = ""

    def __post_init__(self):
        for key, allowed in CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ParameterError(f"{key} must be one of {', '.join(allowed)}; got {getattr(self, key)!r}")
        for key in ("iters", "n_samples", "checkpoint_every"):
            if getattr(self, key) < 0:
                raise ParameterError(f"{key} must be >= 0")
        for key in ("batch", "steps", "bins", "bench_batch"):
            if getattr(self, key) < 1:
                raise ParameterError(f"{key} must be >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ParameterError("need lr >= 0 and 0 <= momentum < 1")
        if self.sigma <= 0 or self.epsilon <= 0 or self.langevin_eps <= 0:
            raise ParameterError("sigma, epsilon and langevin_eps must be positive")
        self.hidden_sizes()
        self.method_list()

    def hidden_sizes(self):
        try:
            sizes = tuple(int(v) for v in self.hidden.split(",") if v.strip())
        except ValueError:
            raise ParameterError(f"hidden must be comma-separated integers, got {self.hidden!r}") from None
        if any(h <= 0 for h in sizes):
            raise ParameterError("hidden sizes must be positive")
        return sizes

    def method_list(self):
        names = [m.strip() for m in self.methods.split(",") if m.strip()]
        if not names:
            raise ParameterError("methods list is empty")
        for m in names:
            if m not in CHOICES["method"]:
                raise ParameterError(f"unknown method {m!r} in methods")
        return names

    @property
    def net_mode(self):
        if self.mode != "auto":
            return self.mode
        return "energy" if self.sde == "none" else "score"

    def updated(self, **changes):
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key, kind, text):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        return kind(text)
    except ValueError:
        raise ParameterError(f"bad value for {key}: {text!r}") from None


def to_text(config: RunConfig) -> str:
    """Canonical form: every field, in declaration order, one ``key = value`` per line."""
    lines = ["# scorelab run configuration"]
    lines += [f"{f.name} = {_format(getattr(config, f.name))}" for f in fields(config)]
    return "\n".join(lines) + "\n"


def parse_text(text: str, base: RunConfig = None) -> RunConfig:
    """Parse ``key = value`` lines over ``base`` (defaults); ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(RunConfig)}
    types = {k: {"str": str, "int": int, "float": float, "bool": bool}.get(v, v) for k, v in types.items()}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ParameterError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], value)
    return replace(base or RunConfig(), **values)


def load(path, base: RunConfig = None) -> RunConfig:
    with open(path) as fh:
        return parse_text(fh.read(), base)
