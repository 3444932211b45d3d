"""Model-compression and quantized-inference toolkit for CNN classifiers.

Float16 and INT8 post-training quantization with calibration, deployment
graph optimization (training-node stripping, batch-norm folding, operator
fusion), a deterministic three-stage training engine with knowledge
distillation and QAT support, and a classification metrics suite.
"""

from .builders import (build_densenet, build_densenet_preset,
                       build_mobilenetv2_classifier, build_small_cnn)
from .graphopt import fold_batchnorm, fuse_conv_activation, optimize, strip_training_nodes
from .ir import (Checkpoint, DType, Graph, Node, QuantParams, Tensor,
                 param_count, validate_graph)
from .metrics import ConfusionMatrix, MetricsReport, confusion_matrix, metrics
from .quantize import (CalibrationStats, CompressionReport, calibrate,
                       compression_report, dequantize_value, quantize_f16,
                       quantize_int8, quantize_value)
from .runtime import ExecutionMode, Executor, execute, execute_int8, execute_logits
from .tmf import parse_tmf, read_tmf, serialize_tmf, write_tmf
from .train import (AdamState, EarlyStopPolicy, FakeQuantState, KDConfig,
                    PlateauPolicy, StageConfig, TrainHistory, adam_step,
                    distill_train, early_stop, fake_quant, forward_backward,
                    kd_loss, reduce_lr_on_plateau, three_stage_train)

__version__ = "0.1.0"
