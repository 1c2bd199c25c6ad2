"""Parameter counts per stage for both variants (the shared decoder counts once)."""
from safnet.model import ModelConfig, SAFNet, count_parameters

TARGETS = {"safnet": 1.12e6, "safnet-s": 0.57e6}

for variant, target in TARGETS.items():
    m = SAFNet(ModelConfig.for_variant(variant))
    total = count_parameters(m)
    parts = {name: count_parameters(getattr(m, name)) for name in ("encoder", "decoder", "refiner")}
    detail = ", ".join(f"{k} {v:,}" for k, v in parts.items())
    print(f"{variant:9s} {total:>10,}  ({total / target - 1:+.1%} vs {target / 1e6:.2f} M)  {detail}")
