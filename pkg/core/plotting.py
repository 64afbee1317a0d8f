from pathlib import Path
from typing import Mapping, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from utils.logger import logger  # noqa: E402


def create_pr_plot(
    curves: Mapping[str, np.ndarray],
    output_path: Path,
    title: str = "Precision-Recall",
) -> Optional[Path]:
    """Draw one precision-recall line per method and save it as SVG.

    Args:
        curves: Method name to an (n, 2) array of (recall, precision) rows.
        output_path: Target file; parent directories are created.
        title: Figure title.

    Returns:
        The path written, or None when plotting failed.
    """
    logger.info(f"Generating precision-recall chart with {len(curves)} curves...")
    try:
        fig, ax = plt.subplots(figsize=(8, 6))
        for name, curve in curves.items():
            curve = np.asarray(curve)
            ax.plot(curve[:, 0], curve[:, 1], marker="o", markersize=3, label=name)
        ax.set_title(title, fontsize=14, weight="bold")
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.05)
        ax.legend(loc="lower left")
        ax.grid(True, which="both", linestyle="--", linewidth=0.5)
        fig.tight_layout()

        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(output_path, format="svg")
        plt.close(fig)
        logger.info(f"Chart saved to: {output_path}")
        return output_path
    except Exception as e:
        logger.error(f"Error creating precision-recall plot: {e}")
        return None
