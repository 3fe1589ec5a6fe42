pub mod config;
pub mod experiments;
pub mod setups;
pub mod validation;
