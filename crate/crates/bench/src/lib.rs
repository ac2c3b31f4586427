//! Shared fixtures for the benchmark targets.

use deepiv_core::data::Dataset;
use deepiv_core::net::{Activation, ParameterSet};
use deepiv_core::rng::RngStream;
use deepiv_core::sim::{simulate, SimConfig};

/// A seeded feed-forward network of the given widths.
pub fn fixture_network(widths: &[usize], seed: u64) -> ParameterSet {
    let mut stream = RngStream::root(seed);
    ParameterSet::init(widths, Activation::Relu, Activation::Identity, &mut stream)
        .expect("valid widths")
}

/// A simulated training set at moderate endogeneity.
pub fn fixture_dataset(n: usize, seed: u64) -> Dataset {
    simulate(&SimConfig::new(n, 0.5, seed)).expect("valid config")
}
