"""Compare bottleneck parameter counts at full scale (weights are allocated, about 1 GB)."""
from voxmamba.network import ModelConfig, build_model, count_parameters

counts = {kind: count_parameters(build_model(ModelConfig.full_scale(bottleneck_kind=kind)))
          for kind in ("vss3d", "tri_oriented")}
for kind, n in counts.items():
    print(f"{kind:13s} {n:>13,}")
print(f"reduction     {1 - counts['vss3d'] / counts['tri_oriented']:.2%}")
