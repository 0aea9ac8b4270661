use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::tensor::Scalar;

/// Slope of the leaky ReLU used throughout the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Kaiming gain for a leaky ReLU with [`LEAKY_SLOPE`].
pub fn leaky_gain() -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

/// Square-kernel 2D convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::Kaiming {
                fan_in,
                gain: leaky_gain(),
            },
            rng,
        );
        let bias = store.add(format!("{name}.bias"), &[out_channels], Init::Zeros, rng);
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// Same-size 3×3 convolution.
    pub fn same3<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self::new(store, rng, name, cin, cout, 3, 1, 1)
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: &Var<'g, T>) -> Var<'g, T> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        x.conv2d(&w, Some(&b), self.stride, self.pad)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Convolution followed by instance normalization and a leaky ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        norm: bool,
    ) -> Self {
        let pad = (kernel - 1) / 2;
        let conv = Conv2d::new(store, rng, name, in_channels, out_channels, kernel, stride, pad);
        ConvBlock { conv, norm }
    }

    pub fn params(&self) -> [ParamId; 2] {
        self.conv.params()
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: &Var<'g, T>) -> Var<'g, T> {
        let mut y = self.conv.forward(g, ps, x);
        if self.norm {
            y = y.instance_norm();
        }
        y.leaky_relu(T::lit(LEAKY_SLOPE))
    }
}
