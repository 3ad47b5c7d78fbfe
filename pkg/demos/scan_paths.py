"""Print the 48 traversal paths of a small grid and check the two path invariants."""
import sys

from voxmamba.paths import enumerate_paths, is_bijective, is_continuous

dims = tuple(int(d) for d in sys.argv[1:4]) if len(sys.argv) == 4 else (2, 3, 4)
for p in enumerate_paths(dims):
    flag = "ok" if is_bijective(p) and is_continuous(p) else "BROKEN"
    head = " ".join(str(i) for i in p.order[:10])
    print(f"o{p.group_index} v{p.variant_index} rot{p.rotation} rev={int(p.reversed)} {flag}  {head} ...")
