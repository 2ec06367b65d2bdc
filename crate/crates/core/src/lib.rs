//! LightCNN: a one-convolution-layer network for multichannel EEG
//! classification, with the preprocessing, training, evaluation and
//! frequency-probing machinery around it.
//!
//! Data flow:
//!
//! ```text
//! manifest + CSVs ─► signal_io ─► preprocess (1 Hz high-pass) ─► epochs ─► split
//!                                                                   │
//!               model ◄── train (Adam, cross-entropy) ◄─────────────┘
//!                 │
//!                 ├─► metrics (precision, recall, F1, accuracy, AUC)
//!                 └─► interpret (sinusoid and white-noise probes)
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod interpret;
mod kernels;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod signal_io;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{ModelConfig, ModelParams};
pub use signal_io::{DatasetSplit, Epoch, Label, Partition};
pub use train::{TrainConfig, TrainHistory};
