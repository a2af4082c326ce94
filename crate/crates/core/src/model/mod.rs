pub mod integrator;
pub mod ocp;
pub mod simulate;
pub mod spme;
pub mod state;

pub use integrator::IntegratorConfig;
pub use simulate::{simulate, simulate_direct, Propagator, Trajectory};
pub use spme::{cavg_p_at_soc, soc_of, Layer, Spme};
pub use state::StateVector;
