"""Cache contract acceptance: extractor output drives the engine end to end.

The engine is exercised only through its public surfaces: the `xsmoe` CLI
and the XSMF byte format. A 10-item manifest is extracted, validated, and
then used for a full 3-window streaming run.
"""

import subprocess
import sys

import numpy as np

from tinyspec import GROUP, HIDDEN
from xsmf_extractor.extract import extract
from xsmf_extractor.manifest import ManifestItem, write_manifest
from xsmf_extractor.xsmf import read_xsmf

WORDS = ["amber", "bolt", "cedar", "dune", "ember", "flint",
         "grove", "heath", "iris", "jade"]


def _xsmoe(*args):
    return subprocess.run([sys.executable, "-m", "xsmoe.cli", *args],
                          capture_output=True, text=True)


def test_a11_cache_contract_end_to_end(tmp_path, tiny_text_encoder,
                                       tiny_image_encoder, item_images):
    manifest = tmp_path / "manifest.csv"
    write_manifest(manifest, [
        ManifestItem(f"sku{i}", f"{WORDS[i]} {WORDS[(i + 3) % 10]} thing", item_images[i])
        for i in range(10)
    ])
    vis = tmp_path / "visual.xsmf"
    tex = tmp_path / "textual.xsmf"
    result = extract(manifest, tiny_text_encoder, tiny_image_encoder, GROUP,
                     tex, vis, batch_size=4)
    assert len(result.item_ids) == 10

    # vectors round-trip bit-exactly through the written files
    for path, arr in ((vis, result.visual), (tex, result.textual)):
        _, ids, loaded = read_xsmf(path)
        assert ids == result.item_ids
        assert loaded.tobytes() == arr.tobytes()

    # the engine's own validator accepts the caches
    proc = _xsmoe("validate-cache", str(vis), str(tex))
    assert proc.returncode == 0, proc.stderr
    assert "ok" in proc.stdout

    # deterministic interaction stream over the ten extracted items
    rng = np.random.default_rng(0)
    inter = tmp_path / "interactions.csv"
    with open(inter, "w") as fh:
        fh.write("user_id,item_id,timestamp\n")
        for t in range(240):
            u = int(rng.integers(0, 12))
            i = (u + int(rng.integers(0, 3))) % 10
            fh.write(f"u{u},sku{i},{t}\n")

    cfg = tmp_path / "run.cfg"
    cfg.write_text("\n".join([
        "seed = 1", "variant = xsmoe", f"d = {HIDDEN}", "d_prime = 8",
        "d_embed = 16", "side_layers = 2", "blocks = 1", "dropout = 0.0",
        "batch_size = 32", "max_epochs = 2", "chunks = 3", "tau = 0.1",
        "measure_timing = false", "eval_workers = 1",
        f"interactions = {inter}",
        f"visual_cache = {vis}",
        f"textual_cache = {tex}",
        f"output_dir = {tmp_path}/out",
    ]) + "\n")
    proc = _xsmoe("run", "--config", str(cfg))
    assert proc.returncode == 0, proc.stderr

    report = (tmp_path / "out" / "report.jsonl").read_text().splitlines()
    assert len(report) >= 3  # warm-up row, window-1 row, avg row
    print("PASS A11 cache contract (extract -> validate-cache -> 3-window run)")
