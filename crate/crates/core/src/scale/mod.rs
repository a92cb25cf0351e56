//! JND scale reconstruction: the functional model, its likelihood, the
//! optimizer, multi-start fitting and bootstrap bands.

pub mod bootstrap;
pub mod fit;
pub mod likelihood;
pub mod model;
pub mod optim;

pub use bootstrap::{bands_to_tsv, bootstrap_source, parse_bands_tsv, BootstrapConfig, BootstrapResult, RdCurveBand, Resampling};
pub use fit::{fit_from, fit_source, CodecModel, FitConfig, FitDiagnostics, ModelSet, SourceModel};
pub use likelihood::{LikelihoodConfig, SourceData};
pub use model::CodecParams;
