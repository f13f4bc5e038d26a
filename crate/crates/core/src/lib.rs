pub mod campaign;
pub mod cli;
pub mod confirm;
pub mod exec;
pub mod hashing;
pub mod mutation;
pub mod oracle;
pub mod report;
pub mod sim;
pub mod trace;
