//! Semi-supervised training of the change-detection network: losses,
//! pseudo-labels, SGD, the per-epoch loop, evaluation, experiment runs and
//! the decoder ablation.

pub mod ablation;
pub mod batch;
pub mod error;
pub mod eval;
pub mod log;
pub mod loss;
pub mod optim;
pub mod run;
pub mod trainer;

pub use ablation::{run_ablation, AblationReport};
pub use error::{Result, TrainError};
pub use eval::evaluate;
pub use log::{read_log, LossReport, MetricsLog};
pub use loss::{consistency_loss, make_pseudo_labels, supervised_loss, total_loss, PseudoLabelBatch};
pub use optim::Sgd;
pub use run::{run_experiment, ExperimentSpec, Mode, RunSummary, Scores};
pub use trainer::Trainer;
