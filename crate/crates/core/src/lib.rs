pub mod audio;
pub mod dataset;
pub mod experiments;
pub mod format;
pub mod model;
pub mod neural;
pub mod plot;
pub mod stats;
pub mod synth;
pub mod waveguide;
