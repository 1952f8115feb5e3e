pub mod bench;
pub mod cli;
pub mod engine;
pub mod layout;
pub mod oracle;
pub mod problem;
pub mod qp;
pub mod resolvents;
pub mod sim;
