pub mod cli;
pub mod energy;
pub mod grid;
pub mod manifold;
pub mod optimizer;
pub mod oracle;
pub mod poisson;
