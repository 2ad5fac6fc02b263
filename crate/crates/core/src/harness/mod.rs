pub mod config;
pub mod experiment;
pub mod fixture;
pub mod manifest;

pub use config::{parse_config, Condition, Settings};
pub use experiment::{run_experiment, RunReport};
pub use fixture::{make_fixture, FixtureKind};
pub use manifest::{ingest_group, GroupManifest};
