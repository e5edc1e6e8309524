"""Plain-text ``key=value`` run configuration."""

import os

from .model import ConfigError, ModelConfig


def _ints(s):
    return [int(v) for v in s.split(",") if v.strip()]


def _floats(s):
    return [float(v) for v in s.split(",") if v.strip()]


def _words(s):
    return [v.strip() for v in s.split(",") if v.strip()]


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _grid(s):
    """``lo:hi:step`` or a comma list."""
    if ":" in s:
        lo, hi, step = (float(v) for v in s.split(":"))
        if step <= 0:
            raise ValueError("grid step must be positive")
        n = int(round((hi - lo) / step)) + 1
        return [round(lo + i * step, 10) for i in range(n)]
    return _floats(s)


def _opt_str(s):
    return s


# key -> (parser, default); default None means "unset"
SCHEMA = {
    "seed": (int, "0"),
    "out": (_opt_str, None),
    "mask.convention": (str, "manipulated-is-black"),

    "model.widths": (_ints, "16,32,64,128,128"),
    "model.convs_per_block": (int, "2"),
    "model.heads": (str, "surface+edge"),
    "model.input_size": (_ints, "64,64"),
    "model.dtype": (str, "float64"),

    "optim.lr": (float, "0.0001"),
    "optim.lr_multiplier": (float, "1"),
    "optim.momentum": (float, "0.9"),
    "optim.weight_decay": (float, "0.0005"),

    "train.data": (_opt_str, None),
    "train.steps": (int, None),
    "train.batch_size": (int, None),
    "train.edge_halfwidth": (int, "1"),

    "gen.n": (int, "8"),
    "gen.size": (_ints, "64,64"),
    "gen.region": (str, "mixed"),
    "gen.area_min": (float, "0.05"),
    "gen.area_max": (float, "0.30"),
    "gen.min_color_distance": (float, "40"),
    "gen.host_noise": (float, "12"),
    "gen.host_corr": (float, "8"),
    "gen.donor_noise": (float, "5"),
    "gen.donor_corr": (float, "2"),
    "gen.blend": (_bool, "false"),

    "infer.checkpoint": (_opt_str, None),
    "infer.images": (_opt_str, None),
    "infer.t_surface": (float, "0.5"),
    "infer.t_edge": (float, "0.5"),

    "eval.gt": (_opt_str, None),
    "eval.sfcn_maps": (_opt_str, None),
    "eval.mfcn_maps": (_opt_str, None),
    "eval.maps": (_opt_str, None),
    "eval.metric": (str, "f1"),
    "eval.sweep_mode": (str, "per-image"),
    "eval.grid": (_grid, "0.01:0.99:0.01"),

    "perturb.images": (_opt_str, None),
    "perturb.gt": (_opt_str, None),
    "perturb.sfcn_checkpoint": (_opt_str, None),
    "perturb.mfcn_checkpoint": (_opt_str, None),
    "perturb.kinds": (_words, "jpeg,blur,awgn"),
    "perturb.jpeg_qualities": (_ints, "70,50"),
    "perturb.blur_sigmas": (_floats, "0.5,1.0,1.5,2.0"),
    "perturb.snr_db": (_floats, "25,20,15"),

    "gradcheck.eps": (float, "1e-5"),
}


class RunConfig:
    """Resolved configuration: raw strings plus typed accessors."""

    def __init__(self, raw=None):
        self.raw = {k: d for k, (_, d) in SCHEMA.items() if d is not None}
        for k, v in (raw or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
        self.raw[key] = value

    def __contains__(self, key):
        return key in self.raw

    def get(self, key):
        return SCHEMA[key][0](self.raw[key]) if key in self.raw else None

    def require(self, key):
        if key not in self.raw or self.raw[key] == "":
            raise ConfigError(f"missing required config key {key!r}")
        return self.get(key)

    def path(self, key):
        p = self.require(key)
        if not os.path.exists(p):
            raise FileNotFoundError(f"{key}: path does not exist: {p}")
        return p

    def model_config(self):
        h_w = self.get("model.input_size")
        if len(h_w) != 2:
            raise ConfigError("model.input_size needs two integers h,w")
        return ModelConfig(
            block_widths=self.get("model.widths"),
            convs_per_block=self.get("model.convs_per_block"),
            heads=self.get("model.heads"),
            input_size=tuple(h_w),
            dtype=self.get("model.dtype"),
        ).validate()

    def to_text(self):
        return "".join(f"{k}={self.raw[k]}\n" for k in sorted(self.raw))

    def write(self, out_dir, name="resolved_config.txt"):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write(self.to_text())


def parse_config_text(text):
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"line {n}: expected key=value, got {s!r}")
        k, v = s.split("=", 1)
        k, v = k.strip(), v.strip()
        if k in raw:
            raise ConfigError(f"line {n}: duplicate key {k!r}")
        raw[k] = v
    return RunConfig(raw)


def load_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read())
