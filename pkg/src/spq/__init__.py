"""Self-supervised product quantization: joint codebook/encoder training,
packed PQ indexes and lookup-table ADC search."""

from .augment import AugmentConfig, make_view_pair, sample_view
from .cqc_loss import CqcConfig, CrossSimMatrix, batch_loss, cross_similarities, loss_backward, pair_loss
from .data import Dataset, gen_synthetic, ingest_cifar10_binary
from .encoder import Encoder, Passthrough, default_encoder
from .evaluation import MetricReport, RelevanceOracle, average_precision, evaluate, kmeans_pq_baseline
from .index import IndexFile, adc_search, build_index, make_lut, pack_codes, unpack_codes
from .numerics import Rng, cosine_similarity, softmax, squared_euclidean
from .pq_head import CodebookSet, hard_assign, reconstruct, soft_quantize, soft_quantize_backward
from .trainer import AdamState, TrainConfig, TrainState, adam_step, cosine_lr, init_state, train, train_epoch

__version__ = "0.1.0"
