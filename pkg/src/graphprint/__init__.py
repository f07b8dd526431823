"""Graph-based fingerprint embedding: graphs, layers, training, evaluation."""

from .autodiff import (BatchNorm, Tensor, concat_cols, concat_rows, constant,
                       grad_check, matmul, neighbor_max, parameter, segment_max)
from .config import (DataConfig, ModelConfig, PerturbConfig, RunConfig,
                     TrainConfig, data_config_from_dict, run_config_from_dict)
from .errors import (DataError, GraphprintError, NumericError, ShapeError,
                     ValidationError)
from .graphs import (Minutia, NeighborGraph, dilated_neighbors, dilation_rates,
                     fingerprint_graph, knn_graph, minutia_distance,
                     neighbor_ranking)
from .layers import (EdgeConvParams, FeedForwardParams, GCNBlockConfig,
                     edge_conv, edge_features, feed_forward, gcn_block)
from .metrics import (ScoreSet, eer, oversmoothing_curve, similarity,
                      tar_at_far, topk_accuracy)
from .model import (ModelParams, embed_batch, embed_with_gallery,
                    encode_minutiae, encode_minutiae_batch, refine_batch)
from .rng import stream
from .synth import (FingerprintRecord, IdentityTemplate, gen_dataset,
                    gen_identity, gen_impression, split_dataset)
from .training import (AdamW, Triplet, augment, batch_triplet_loss, cosine_lr,
                       mine_triplets, pairwise_distances, train, triplet_loss)

__version__ = "0.1.0"
