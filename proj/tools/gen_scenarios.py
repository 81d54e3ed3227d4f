#!/usr/bin/env python3
"""Writes the shipped scenario files under scenarios/.

Rerun after changing the layout; congestion thresholds in neighborhood100.json
come from `cityfabric graph calibrate` and are patched in with --thresholds.
"""
import argparse
import json
import random
from pathlib import Path

CLASSES = ["two_wheeler", "sedan", "three_wheeler", "suv", "bus", "truck", "lcv", "bicycle"]


def power_table():
    return {
        "models": {
            "JO32": {"fps_capacity": 200, "tops": 200, "power_idle_w": 22.4, "power_per_fps_w": 0.2},
            "JO64": {"fps_capacity": 400, "tops": 275, "power_idle_w": 27.9, "power_per_fps_w": 0.15},
        }
    }


def fleet_devices():
    return [{"id": f"JO32-{i}", "model": "JO32"} for i in range(1, 6)] + [
        {"id": f"JO64-{i}", "model": "JO64"} for i in range(1, 5)
    ]


def grid_graph(rows, cols, rng):
    """Cameras on a grid; every street between neighbours runs through 1-2 plain
    junctions, and some blocks get a second parallel street."""
    vertices, edges = [], []
    cam = lambda r, c: f"J{r:02d}{c:02d}"
    for r in range(rows):
        for c in range(cols):
            vertices.append({"id": cam(r, c), "camera": True, "x": c * 100.0, "y": r * 100.0})
    n = 0

    def street(a, b, ax, ay, bx, by, hops, bend):
        nonlocal n
        prev = a
        for h in range(1, hops):
            n += 1
            vid = f"X{n:04d}"
            t = h / hops
            vertices.append({"id": vid, "camera": False, "x": ax + (bx - ax) * t + bend, "y": ay + (by - ay) * t + bend})
            edges.append([prev, vid])
            prev = vid
        edges.append([prev, b])

    for r in range(rows):
        for c in range(cols):
            for dr, dc in ((0, 1), (1, 0)):
                r2, c2 = r + dr, c + dc
                if r2 >= rows or c2 >= cols:
                    continue
                a, b = cam(r, c), cam(r2, c2)
                hops = 2 if rng.random() < 0.7 else 3
                street(a, b, c * 100.0, r * 100.0, c2 * 100.0, r2 * 100.0, hops, 0.0)
                if rng.random() < 0.15:
                    street(a, b, c * 100.0, r * 100.0, c2 * 100.0, r2 * 100.0, 3, 18.0)
    return {"vertices": vertices, "edges": edges}


def fl_clients():
    clients = []
    for i in range(1, 6):
        clients.append({"id": f"jo32-{i}", "tier": "JO32", "streams": 28, "latency_mean_s": 6.3})
    for i in range(1, 5):
        clients.append({"id": f"jo64-{i}", "tier": "JO64", "streams": 40, "latency_mean_s": 4.0})
    return clients


def neighborhood100(thresholds):
    rng = random.Random(100)
    graph = grid_graph(10, 10, rng)
    cams = [v["id"] for v in graph["vertices"] if v["camera"]]
    streams = []
    for i, j in enumerate(cams):
        # per-camera rates spread around the neighbourhood mean
        rate = round(564.0 * (0.75 + 0.5 * rng.random()), 1)
        streams.append({"id": f"cam{i:03d}", "junction_id": j, "fps": 25, "process": {"rate_per_min": rate}})
    mean = sum(s["process"]["rate_per_min"] for s in streams) / len(streams)
    for s in streams:  # renormalise so the fleet-wide mean is exact
        s["process"]["rate_per_min"] = round(s["process"]["rate_per_min"] * 564.0 / mean, 2)
    return {
        "name": "neighborhood100",
        "seed": 2024,
        "classes": CLASSES,
        "power_table": "powercal.json",
        "devices": fleet_devices(),
        "scheduler": {"policy": "bestfit"},
        "traffic_defaults": {
            "diurnal_amplitude": 0.1,
            "diurnal_period_s": 900,
            "diurnal_phase_s": 0,
            "modulation": {"sigma": 0.15, "rho": 0.85, "segment_s": 60, "shared_weight": 0.5, "shared_seed": 77},
            "dwell_frames": 25,
            "dwell_jitter": 0.5,
        },
        "streams": streams,
        "road_graph": graph,
        "intervals": {"duration_s": 900, "window_len_s": 15, "lateness_s": 2, "tail_horizon_s": 1800,
                      "forecast_period_s": 5},
        "congestion_thresholds": thresholds,
        "allocation": {"weighting": "multiplicity", "endpoint": "sum"},
        "forecast": {"model": "graph_gru", "lag_minutes": 5, "horizon_minutes": 5, "step_minutes": 1,
                     "hidden": 32, "epochs": 12, "lr": 0.005, "lr_decay": 0.9, "batch_size": 16,
                     "history_minutes": 720, "test_minutes": 240, "seed": 7},
        "fl": {"rounds": 5, "tau": 0.3, "epochs": 3, "lr": 0.01, "batch_size": 32, "window_s": 20,
               "duration_min": 150, "target_frames": 0, "seed": 11, "clients": fl_clients()},
    }


def toy4():
    graph = {
        "vertices": [
            {"id": "A", "camera": True, "x": 0, "y": 0},
            {"id": "B", "camera": True, "x": 100, "y": 0},
            {"id": "C", "camera": True, "x": 100, "y": 100},
            {"id": "D", "camera": True, "x": 0, "y": 100},
            {"id": "p1", "camera": False, "x": 50, "y": 0},
            {"id": "p2", "camera": False, "x": 100, "y": 50},
            {"id": "p3", "camera": False, "x": 50, "y": 50},
        ],
        "edges": [["A", "p1"], ["p1", "B"], ["B", "p2"], ["p2", "C"], ["C", "D"], ["D", "A"], ["A", "p3"], ["p3", "C"]],
    }
    return {
        "name": "toy4",
        "seed": 4,
        "classes": CLASSES,
        "power_table": "powercal.json",
        "devices": [{"id": "JO32-1", "model": "JO32"}, {"id": "JO64-1", "model": "JO64"}],
        "traffic_defaults": {"rate_per_min": 180, "diurnal_amplitude": 0.2, "diurnal_period_s": 600,
                             "modulation": {"sigma": 0.1, "rho": 0.8, "segment_s": 60, "shared_weight": 0.5,
                                            "shared_seed": 5}},
        "streams": [{"id": f"cam{i}", "junction_id": j, "fps": 25} for i, j in enumerate("ABCD")],
        "road_graph": graph,
        "intervals": {"duration_s": 120, "window_len_s": 15, "lateness_s": 2, "forecast_period_s": 1},
        "congestion_thresholds": {"t1": 60, "t2": 120},
        "forecast": {"model": "graph_gru", "hidden": 8, "epochs": 3, "history_minutes": 120, "test_minutes": 40},
        "fl": {"rounds": 2, "duration_min": 10, "window_s": 20, "holdout_per_class": 30,
               "clients": [{"id": "a", "tier": "JO32", "streams": 2}, {"id": "b", "tier": "JO64", "streams": 3}]},
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "scenarios"))
    ap.add_argument("--thresholds", nargs=2, type=float, metavar=("T1", "T2"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    thresholds = {"t1": 30, "t2": 80}
    existing = out / "neighborhood100.json"
    if args.thresholds:
        thresholds = {"t1": args.thresholds[0], "t2": args.thresholds[1]}
    elif existing.exists():
        thresholds = json.loads(existing.read_text())["congestion_thresholds"]

    def dump(name, obj):
        (out / name).write_text(json.dumps(obj, indent=1) + "\n")

    dump("powercal.json", power_table())
    dump("fleet_5x200_4x400.json", {"power_table": "powercal.json", "devices": fleet_devices()})
    dump("fl_clients9.json", {"clients": fl_clients()})
    dump("neighborhood100.json", neighborhood100(thresholds))
    dump("toy4.json", toy4())


if __name__ == "__main__":
    main()
