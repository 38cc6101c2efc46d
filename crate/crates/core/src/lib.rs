//! Federated ensemble wrappers for pre-trained local classifiers.
//!
//! Everything here is `no_std` + `alloc`: models and their training,
//! Dirichlet partitioning, FedAvg and the round loop, the stacking and
//! bagging wrappers, metrics, and the protocol state machines. Sockets,
//! files and wall clocks live in the `fedwrap` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod federation;
pub mod math;
pub mod metrics;
pub mod model;
pub mod runtime;
pub mod sim;
pub mod wrapper;

pub use dataset::{Dataset, Partition, PartitionMode, PartitionSpec};
pub use federation::{ClientUpdate, FederationPlan};
pub use model::{Model, ModelKind, ModelSpec, ParamBlock, TrainHp};
pub use wrapper::{LocalModelHandle, WrapperConfig, WrapperMode, WrapperState};
