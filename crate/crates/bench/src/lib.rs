//! Fixtures shared by the benchmarks.

use tbe_core::net::Conv2dSpec;
use tbe_core::protocols::{rng_for, RngStream};
use tbe_core::{HeadId, LayerSpec, Network, Tensor};

/// The MNIST-Split MLP: 784-400-400 with five two-way heads.
pub fn split_mlp() -> Network {
    let heads: Vec<(HeadId, usize)> = (0..5).map(|t| (HeadId::for_task(t), 2)).collect();
    let mut net = Network::mlp(784, &[400, 400], &heads).expect("valid architecture");
    net.init_uniform(&mut rng_for(0, RngStream::Init));
    net
}

/// A small CNN on 3x32x32 inputs.
pub fn small_cnn() -> Network {
    let conv = |i, o, stride| {
        LayerSpec::Conv2d(Conv2dSpec {
            in_channels: i,
            out_channels: o,
            kernel_h: 3,
            kernel_w: 3,
            stride,
            padding: 1,
        })
    };
    let specs = vec![
        conv(3, 16, 1),
        LayerSpec::Relu,
        conv(16, 32, 2),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::dense(32 * 16 * 16, 64),
        LayerSpec::Relu,
        LayerSpec::heads(64, [(HeadId::for_task(0), 10)]),
    ];
    let mut net = Network::new(&[3, 32, 32], specs).expect("valid architecture");
    net.init_uniform(&mut rng_for(0, RngStream::Init));
    net
}

/// Deterministic pseudo-random batch shaped for `net`.
pub fn batch(net: &Network, rows: usize) -> Tensor {
    let per: usize = net.input_shape().iter().product();
    let data = (0..rows * per).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
    let mut shape = vec![rows];
    shape.extend_from_slice(net.input_shape());
    Tensor::new(shape, data).expect("shape matches data")
}
