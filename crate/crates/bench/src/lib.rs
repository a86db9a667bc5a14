//! Shared fixtures for the benchmarks.

use mglmm::sim::simulate_design;
use mglmm::{Design, SimConfig};

/// A bivariate Gaussian and Poisson design with `q` clusters of
/// `cluster_size` rows each, drawn at the default settings.
pub fn bivariate(q: usize, cluster_size: usize) -> Design {
    let sim = SimConfig { cluster_size, ..Default::default() };
    simulate_design(&sim, 1.0, q, 0).expect("default simulation settings are valid")
}
