"""Evaluates the published per-layer cost formulas for configs/published_costs.cfg.

Writes name,macs,mem_floats for every [cost] row. Run from the repository root:
    python3 tests/golden/published_cost.py > tests/golden/published_cost.csv
"""
import sys


def read_rows(path):
    rows, current = [], None
    for raw in open(path):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[cost]":
            current = {}
            rows.append(current)
        elif "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            current[k] = v
    return rows


def cost(r):
    H, T, dh, dm = (int(r[k]) for k in ("n_heads", "T", "d_head", "d_model"))
    rope = r.get("position", "xl") == "rope"
    C = 1 if rope else int(r.get("context_mult", 2))
    pos_m, pos_f = (0, 0) if rope else (2 * C * T * dh * dm, 2 * C * T * dh)
    if r["variant"] == "dense":
        macs = H * (4 * T * dh * dm + 2 * C * T * T * dh) + H * pos_m
        mem = H * (4 * T * dh + 2 * C * T * T) + H * pos_f
    elif r["variant"] == "switchhead":
        K = int(r["k_active"])
        copies = 1 if r.get("shared_pos", "true") == "true" else H
        macs = H * (2 * T * dh * dm + 2 * T * K * dh * (dm + 1) + 2 * C * T * T * dh) + copies * pos_m
        mem = H * (4 * T * dh + 2 * C * T * T) + copies * pos_f
    else:
        raise SystemExit("unsupported variant " + r["variant"])
    return macs, mem


def main():
    path = sys.argv[1] if len(sys.argv) > 1 else "configs/published_costs.cfg"
    print("name,macs,mem_floats")
    for r in read_rows(path):
        macs, mem = cost(r)
        print(f"{r['name']},{macs},{mem}")


if __name__ == "__main__":
    main()
