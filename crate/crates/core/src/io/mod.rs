//! On-disk formats: the binary tensor container and flat config files.

pub mod config;
pub mod container;

pub use config::KvConfig;
pub use container::{read_container, write_container, ContainerObject, Manifest, ObjectType};
