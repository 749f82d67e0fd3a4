//! Task-space regulation of robot manipulators under sinusoidal
//! disturbances with internal-model compensators.

pub mod config;
pub mod controllers;
pub mod dynamics;
pub mod exosystem;
pub mod internal_model;
pub mod linalg;
pub mod simulation;
pub mod trajectory_csv;
pub mod verify;
