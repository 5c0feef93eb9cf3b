"""Expandable side mixture-of-experts for multimodal streaming recommendation."""

from . import checkpoint, config, data, numerics, optim, seqrec, stream
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    NumericalAbort,
    ShapeError,
    XsmoeError,
)
from .model import (
    ExpertNet,
    FusionHead,
    RecModel,
    Router,
    SideLayer,
    SideNetwork,
)
from .numerics import Tensor, backward, no_grad
from .optim import Adam
from .seqrec import PopularityTable, SeqEncoder, batch_loss, build_popularity, score
from .stream import (
    StreamDataset,
    WindowSchedule,
    chunk_stream,
    evaluate_records,
    run_stream,
    run_window,
    split_window,
)

__version__ = "0.1.0"
