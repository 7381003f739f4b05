//! Sensitivity-aware grouped vector quantization for small weight matrices:
//! Kronecker-factored Fisher estimation, curvature-driven per-channel bit
//! allocation, gradient-shifted codebook targets, a softmax calibration toy
//! model, and the on-disk tensor formats tying them together.

pub mod edsg;
pub mod error;
pub mod eval;
pub mod fim;
pub mod tensorio;
pub mod toymodel;
pub mod wcsg;

pub use edsg::{decode, quantize_matrix, quantize_matrix_with, MetricMode, PipelineOverrides, QuantizeConfig};
pub use error::{Error, Result};
pub use eval::{metrics, AblationReport, Axis, Metrics};
pub use fim::{estimate_kronecker_fim, KroneckerFim, NaturalGradient};
pub use tensorio::{GradientBundle, GroupBlock, QuantizedTensor, WeightMatrix};
pub use toymodel::{generate, TaskParams, ToyTask};
pub use wcsg::{build_profile, SensitivityProfile};
