pub mod lorenz;
pub mod burgers;
pub mod synthetic;
