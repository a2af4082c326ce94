pub mod cell;
pub mod presets;

pub use cell::{CellConfig, ElectrodeConfig, ParameterVector, SeparatorConfig, PARAMETER_COUNT};
pub mod load;

pub use load::{load_config, parse_config, LoadedConfig, CONFIG_ENV};
