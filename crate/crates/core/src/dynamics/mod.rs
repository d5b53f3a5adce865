pub mod integrate;
pub mod machine;
pub mod model;

pub use integrate::{
    integrate, CollapseReport, CollapseTrigger, IntegrationOptions, NoController, Trajectory, TrajectorySample,
    WindowController, WindowData,
};
pub use machine::{AvrParams, GovernorParams, MachineModel};
pub use model::{assemble_dae, DaeSystem, LinearizedSystem, OperatingPoint, Setpoints, OMEGA_S};
