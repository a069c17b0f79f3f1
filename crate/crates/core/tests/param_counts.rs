//! Closed-form parameter counts against element sums of built networks.

use ccforecast_core::architectures::{param_count, Architecture, Network, NetworkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gate blocks written out one matrix at a time.
fn enumerated(spec: &NetworkSpec) -> usize {
    let (d, h) = (spec.input_dim, spec.hidden);
    let lstm_layer = |input: usize| 4 * (h * input + h * h + h);
    match spec.architecture {
        Architecture::Basic => lstm_layer(d) + h + 1,
        Architecture::Stacked => lstm_layer(d) + (1..spec.layers).map(|_| lstm_layer(h)).sum::<usize>() + h + 1,
        Architecture::Bi => 2 * lstm_layer(d) + 2 * h + 1,
        // Each gate convolves the [input channel; h hidden channels] stack.
        Architecture::Conv => 4 * (h * (1 + h) * spec.kernel + h) + h + 1,
    }
}

#[test]
fn table_anchor() {
    assert_eq!(param_count(&NetworkSpec::new(Architecture::Bi, 196, 64)), 133_761);
}

#[test]
fn random_descriptors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..100 {
        let arch = Architecture::ALL[i % 4];
        let mut spec = NetworkSpec::new(arch, rng.random_range(1..=64), rng.random_range(1..=48));
        match arch {
            Architecture::Stacked => spec = spec.with_layers(rng.random_range(2..=4)),
            Architecture::Conv => spec = spec.with_kernel(2 * rng.random_range(0..=3) + 1),
            _ => {}
        }
        let net = Network::build(spec, i as u64).unwrap();
        let elements: usize = net.params.iter().map(|t| t.len()).sum();
        let by_shape: usize = spec.tensor_shapes().iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(param_count(&spec), elements, "{spec:?}");
        assert_eq!(elements, by_shape, "{spec:?}");
        assert_eq!(elements, enumerated(&spec), "{spec:?}");
        assert_eq!(net.live_param_count(), elements);
    }
}
