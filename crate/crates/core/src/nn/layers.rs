use crate::autograd::Var;
use crate::rng::Rng;
use crate::tensor::Float;

use super::params::{Bound, Init, ParameterStore};

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn lrelu<T: Float>(x: Var<'_, T>) -> Var<'_, T> {
    x.leaky_relu(LEAKY_SLOPE)
}

/// Square-kernel convolution with bias; padding keeps `H / stride` output size.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Float>(
        store: &mut ParameterStore<T>,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.add(&weight, &[out_channels, in_channels, kernel, kernel], Init::Orthogonal, rng);
        store.add(&bias, &[out_channels], Init::Zeros, rng);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(p.var(&self.weight), Some(p.var(&self.bias)), self.stride, self.kernel / 2)
    }
}

/// Affine map of a vector: `[in] -> [out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParameterStore<T>,
        rng: &mut Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        Self::with_init(store, rng, name, in_features, out_features, Init::Orthogonal)
    }

    pub fn with_init<T: Float>(
        store: &mut ParameterStore<T>,
        rng: &mut Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        // stored as [in, out] so that a row vector times the weight is the output
        store.add(&weight, &[in_features, out_features], init, rng);
        store.add(&bias, &[1, out_features], Init::Zeros, rng);
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }

    /// `x` of shape `[in]` or `[rows, in]`; returns `[out]` or `[rows, out]`.
    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let shape = x.shape();
        let rows = if shape.len() == 1 { 1 } else { shape[0] };
        let y = x.reshape(&[rows, self.in_features]).matmul(p.var(&self.weight));
        let b = p.var(&self.bias);
        let b = if rows == 1 {
            b
        } else {
            Var::concat(&vec![b; rows])
        };
        let y = y + b;
        if shape.len() == 1 {
            y.reshape(&[self.out_features])
        } else {
            y
        }
    }
}

/// Bottleneck residual block: `x + expand(lrelu(conv3x3(lrelu(reduce(x)))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    reduce: Conv2d,
    conv: Conv2d,
    expand: Conv2d,
}

impl ResBlock {
    pub fn new<T: Float>(store: &mut ParameterStore<T>, rng: &mut Rng, name: &str, channels: usize) -> Self {
        let mid = (channels / 4).max(1);
        Self {
            reduce: Conv2d::new(store, rng, &format!("{name}.reduce"), channels, mid, 1, 1),
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), mid, mid, 3, 1),
            expand: Conv2d::new(store, rng, &format!("{name}.expand"), mid, channels, 1, 1),
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = lrelu(self.reduce.forward(p, x));
        let h = lrelu(self.conv.forward(p, h));
        x + self.expand.forward(p, h)
    }
}

/// Learned `[rows, dim]` lookup table.
#[derive(Clone, Debug)]
pub struct Embedding {
    table: String,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Float>(store: &mut ParameterStore<T>, rng: &mut Rng, name: &str, rows: usize, dim: usize) -> Self {
        let table = format!("{name}.table");
        store.add(&table, &[rows, dim], Init::Orthogonal, rng);
        Self { table, rows, dim }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, '_, T>, id: usize) -> crate::Result<Var<'g, T>> {
        if id >= self.rows {
            return Err(crate::Error::InvalidArgument(format!(
                "category id {id} out of range 0..{}",
                self.rows
            )));
        }
        Ok(p.var(&self.table).select_row(id))
    }
}
