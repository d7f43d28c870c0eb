pub mod cli;
pub mod guest;
pub mod hw;
pub mod kernel;
pub mod report;
pub mod scenarios;
pub mod sim;
