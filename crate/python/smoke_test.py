"""Smoke test for the afford extension module.

Build first with `maturin develop -m crates/py/Cargo.toml` (or install the
wheel), then run `python python/smoke_test.py`.
"""

import math
import tempfile

import afford


def main():
    with tempfile.TemporaryDirectory() as tmp:
        demo = afford.write_demo(tmp, entries=8, tasks=2, seed=1)
        memory = afford.Memory.load(demo["memory"])
        scene = afford.Scene.load(demo["scene"])
        assert len(memory) == 8, len(memory)
        assert len(memory.tasks()) == 2

        report = afford.retrieve(memory, scene, demo["instruction"], demo["object"])
        assert report["entry_id"] == demo["truth"]["entry_id"], report["entry_id"]
        trace = report["stage_trace"]
        assert trace["memory"] >= trace["task"] >= trace["semantic"] >= trace["geometric"]

        a2d = afford.transfer(memory, scene, report["entry_id"])
        a3d = afford.lift(scene, a2d)
        full = afford.infer(memory, scene, demo["instruction"], demo["object"])
        assert full["affordance3d"] == a3d

        want = demo["truth"]["direction"]
        got = a3d["direction"]
        cos = sum(a * b for a, b in zip(want, got))
        angle = math.degrees(math.acos(max(-1.0, min(1.0, cos))))
        assert angle < 10.0, angle

        k = scene.intrinsics
        u, v = k.project(*k.unproject(10.0, 20.0, 1.5))
        assert abs(u - 10.0) < 1e-9 and abs(v - 20.0) < 1e-9

        feats = scene.features
        assert feats.imd(feats) == 0.0
        row, col, _, _, score = feats.best_match(feats.cell(3, 4))
        assert (row, col) == (3, 4) and score > 0.999

        direction, inliers = afford.fit_line([(0, 0), (10, 0), (20, 0), (30, 0), (10, 9)])
        assert abs(direction[0] - 1.0) < 1e-12 and inliers == [True, True, True, True, False]

        try:
            afford.Memory.load(tmp + "/nowhere")
        except afford.AffordError:
            pass
        else:
            raise AssertionError("loading a missing memory should fail")

    print(f"smoke test ok: retrieved {report['entry_id']}, 3D direction within {angle:.2f} deg")


if __name__ == "__main__":
    main()
