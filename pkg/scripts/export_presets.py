"""Write every built-in preset to configs/<name>_<scale>.json."""
import argparse
from pathlib import Path

from longiseg.config import PRESETS, preset, save_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "configs"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in PRESETS:
        for scale in ("paper", "desk"):
            cfg = preset(name, scale)
            save_config(cfg, out / f"{cfg.name}.json")
            print(out / f"{cfg.name}.json")


if __name__ == "__main__":
    main()
