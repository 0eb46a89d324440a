//! Synthetic non-IID client datasets.

mod io;
mod partition;
mod report;
mod synth;

pub(crate) use io::write_atomic;
pub use io::{
    decode_dataset, decode_params, encode_dataset, encode_params, load_dataset, load_params, load_sidecar,
    save_dataset, save_params, save_sidecar, DatasetSidecar, MAGIC,
};
pub use partition::{generate_dataset, partition, ClientDataset, FederatedDataset, Provenance, ShiftTransform};
pub use report::{heterogeneity_report, js_divergence, HeterogeneityReport};
pub use synth::{generate_global_pool, SamplePool, Samples, ScenarioKind, SyntheticConfig, TEST_FRACTION};
