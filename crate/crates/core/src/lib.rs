pub mod backward;
pub mod cli;
pub mod error;
pub mod exec;
pub mod forward;
pub mod geometry;
pub mod he_sim;
pub mod ledger;
pub mod oracle;
pub mod packing;
pub mod protocol;
pub mod rotate;
pub mod tensor;
