import logging
import os

from tools.common.rng import PURPOSE_DATA, replicate_stream
from tools.plasmode.plasmode_dgm import PlasmodeScenario
from tools.simulate.sources import resolve_source
from tools.tabular.dataset import write_table

_logger = logging.getLogger(__name__)


def write_plasmode_tables(outcome: str = "1yr", n: int = 2000, seed: int = 0, out_dir: str = "output",
                          cohort_size: int = PlasmodeScenario.cohort_size, replicate: int = 0) -> dict[str, str]:
    """写出替身队列和一次生成的数据（完整版与遮盖 PHQ 后的分析版）

    生成数据与 simulate 中相同 (seed, 重复编号) 的那次重复一致。
    """
    source = resolve_source({"plasmode": outcome, "n": n, "cohort_size": cohort_size}, seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    draw = source.draw(replicate_stream(seed, source.id, replicate, PURPOSE_DATA))
    paths = {
        "cohort": os.path.join(out_dir, f"cohort_seed{seed}.csv"),
        "ideal": os.path.join(out_dir, f"{source.id}_r{replicate}_ideal.csv"),
        "analysis": os.path.join(out_dir, f"{source.id}_r{replicate}_analysis.csv"),
    }
    write_table(source.cohort, paths["cohort"])
    write_table(draw.ideal, paths["ideal"])
    write_table(draw.observed, paths["analysis"])
    missing = 1.0 - draw.ideal.column("R").mean()
    _logger.info("%s: n=%d，PHQ 缺失比例 %.3f，写入 %s", source.id, draw.ideal.n_rows, missing, out_dir)
    return paths
