"""Print the per-tensor parameter breakdown of a model config (defaults if none given)."""
import argparse

from hrpiano.models import HRplusConfig, HybridConfig, count_model_params, load_model_config, param_report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("configs", nargs="*", help="model config files; default HRplus and hybrid if omitted")
    ap.add_argument("--summary", action="store_true", help="only print the totals")
    args = ap.parse_args()
    named = [(p, load_model_config(p)) for p in args.configs] or [("HRplus (default)", HRplusConfig()),
                                                                  ("HRplus-hybrid (default)", HybridConfig())]
    for name, cfg in named:
        print(f"# {name}: {count_model_params(cfg):,} parameters")
        if not args.summary:
            print(param_report(cfg))
            print()


if __name__ == "__main__":
    main()
