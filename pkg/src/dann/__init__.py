"""Adversarial domain adaptation for binary event classifiers.

A small numpy-only stack: a hand-differentiated dense network with a shared
feature extractor, a label predictor trained on labeled source events, and
an adversarial domain classifier whose reversed, scaled gradients push the
extractor toward domain-invariant features. Around it: synthetic two-domain
data, training with dynamic stopping and spike handling, bias metrics
(weighted AUC, KS, binned significance, purity), and scan tooling with an
unsupervised rule for choosing the coupling strength.
"""

__version__ = "0.1.0"

from .data import (
    Dataset,
    Event,
    Standardizer,
    SyntheticConfig,
    bayes_auc,
    generate_synthetic,
    read_events_csv,
    split,
    subsample_to_fraction,
    write_events_csv,
)
from .errors import ConfigError, DataFormatError, TrainingDiverged
from .experiments import (
    EvalSettings,
    FractionScanResult,
    ScanPoint,
    ScanResult,
    aggregate_percentile,
    evaluate_model,
    lambda_scan,
    select_lambda,
    signal_fraction_scan,
)
from .metrics import (
    PurityCurve,
    ResponseHistogram,
    ams,
    ams_from_histogram,
    ks_distance,
    purity_efficiency_curve,
    response_histogram,
    roc_auc,
)
from .model import (
    DannConfig,
    DannNetwork,
    Head,
    LossSetup,
    balance_weights,
    build_network,
    dann_backward,
    dann_forward,
    domain_loss,
    label_loss,
)
from .nn import (
    ActivationKind,
    Adam,
    DenseLayer,
    OptimizerState,
    RMSProp,
    backward,
    forward,
    optimizer_step,
    xavier_init,
)
from .training import (
    SpikeGuard,
    TrainConfig,
    TrainRecord,
    TrainedModel,
    make_epoch_batches,
    should_stop,
    spike_monitor,
    train,
)
