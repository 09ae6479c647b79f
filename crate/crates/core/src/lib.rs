pub mod bench;
pub mod choice;
pub mod clock;
pub mod cloud;
pub mod device;
pub mod models;
pub mod policy;
pub mod profiler;
pub mod sim;
pub mod specdec;
pub mod transport;
pub mod types;
