import pandas as pd

from openlandmark.encoder import Checkpoint


def _banner(title: str) -> str:
    txt = "{:-^80s}".format("")
    txt += "\n{:^80s}".format(title)
    txt += "\n{:-^80s}".format("")
    return txt


def txt_checkpoint(obj: Checkpoint) -> str:
    """Function that creates several lines of text with the checkpoint data.

    Parameters
    ----------
    obj : openlandmark.encoder.Checkpoint
        Checkpoint instance

    Returns
    -------
    str
        output text with checkpoint data
    """
    arch = obj.architecture
    txt = _banner("Landmark encoder")
    txt += f"\nInput shape: {arch.input_shape[0]}x{arch.input_shape[1]}"
    txt += f"\tLandmarks: {arch.n_landmarks}"
    txt += f"\tActive: {len(obj.active)}"
    txt += f"\tAnchors: {obj.anchors}"
    txt += f"\nChannels: {', '.join(str(c) for c in arch.channels)}"
    txt += f"\tLayers per block: {', '.join(str(n) for n in arch.layers_per_block)}"
    txt += f"\tHead: {arch.head_hidden}"
    txt += f"\nParameters: {obj.params.n_parameters}"
    if obj.metadata:
        txt += "\n\nTraining:\n"
        txt += "\n".join(f"  {k}: {v}" for k, v in sorted(obj.metadata.items()))
    if obj.prune_report:
        txt += "\n\nPruning:\n"
        txt += pd.DataFrame(obj.prune_report).to_string(header=True, index=False)
    return txt


def txt_table(title: str, df: pd.DataFrame) -> str:
    """Banner followed by a table, used for histories, prune reports and scores."""
    return _banner(title) + "\n" + df.to_string(header=True, index=False)
