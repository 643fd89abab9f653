"""Convolutional prototype learning: a feature extractor trained jointly
with per-class prototypes, nearest-prototype prediction, threshold-based
rejection, and class-incremental extension."""

from .data import (Batch, Dataset, batches, dataset_from_idx,
                   load_idx_images, load_idx_labels, make_gaussian_blobs,
                   make_uniform_noise, normalize, outliers_from_idx,
                   save_idx_images, save_idx_labels, subsample)
from .errors import (CheckpointCRCError, CheckpointError,
                     CheckpointMagicError, CheckpointTruncatedError,
                     CheckpointVersionError, FormatError, NumericError,
                     ParameterError, ProtoLearnError)
from .losses import (LOSS_KINDS, LossGrad, LossHyper, combined_loss_grad,
                     dce_loss_grad, gmcl_loss_grad, mce_loss_grad,
                     mcl_loss_grad, pl_loss_grad, softmax_cross_entropy)
from .net import (DEFAULT_ARCH, ArchSpec, Network, backward, forward,
                  init_network, parse_arch)
from .openset import (RejectionCurve, ar_rr_curve, confidence, confidences,
                      extend_model, write_curve)
from .proto import (GenuineRival, Prediction, PrototypeBank,
                    add_class_prototype, batch_squared_distances,
                    discriminant, init_prototypes, nearest_genuine_and_rival,
                    predict, predict_batch, prototype_probabilities,
                    squared_distance, squared_distances)
from .train import (EvalReport, GradCheckReport, Model, SoftmaxModel,
                    TrainConfig, evaluate, evaluate_softmax,
                    extract_features, gradient_check, load_model, save_model,
                    train, train_softmax_baseline, write_metrics)

__version__ = "0.1.0"
