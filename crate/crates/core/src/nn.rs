//! Named parameter storage and the small layer vocabulary the models share.

use std::collections::BTreeMap;

use triplane_tensor::{Array, Checkpoint, Graph, Rng, Scalar, Var};

use crate::error::{CoreError, Result};

/// Name-keyed parameter arrays. Iteration order is the sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params<T> {
    map: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.map.get(name).ok_or_else(|| CoreError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array<T>> {
        self.map.get_mut(name).ok_or_else(|| CoreError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Array::len).sum()
    }

    /// Sets every parameter under `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.map.iter_mut() {
            if k.starts_with(prefix) {
                v.data_mut().fill(T::zero());
            }
        }
    }

    /// Adds parameters to a graph. Trainable parameters receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) {
        for (k, v) in &self.map {
            ck.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Reads every array whose name starts with `prefix` (prefix stripped).
    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut p = Params::new();
        for name in ck.names() {
            if let Some(rest) = name.strip_prefix(prefix) {
                p.insert(rest, ck.get::<T>(name)?);
            }
        }
        Ok(p)
    }
}

/// Parameters bound as graph leaves for one forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Names externally created graph leaves, e.g. the inputs of a gradient check.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| CoreError::MissingParam(name.to_string()))
    }

    /// Gradients after `backward`; parameters the loss did not reach get zeros.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Params<T> {
        let mut out = Params::new();
        for (k, &v) in &self.vars {
            let grad = g.grad(v).cloned().unwrap_or_else(|| Array::zeros(g.shape(v)));
            out.insert(k.clone(), grad);
        }
        out
    }
}

/// Fan-in scaled Gaussian initialization.
fn init_weight<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Array<T> {
    Array::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut Rng) {
        p.insert(format!("{}.w", self.name), init_weight(vec![self.din, self.dout], self.din, rng));
        p.insert(format!("{}.b", self.name), Array::zeros(vec![self.dout]));
    }

    pub fn init_zero<T: Scalar>(&self, p: &mut Params<T>) {
        p.insert(format!("{}.w", self.name), Array::zeros(vec![self.din, self.dout]));
        p.insert(format!("{}.b", self.name), Array::zeros(vec![self.dout]));
    }

    /// `x: [N, din] -> [N, dout]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let w = b.var(&format!("{}.w", self.name))?;
        let bias = b.var(&format!("{}.b", self.name))?;
        let y = g.matmul(x, w)?;
        Ok(g.add(y, bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    /// Same-size 3×3 convolution.
    pub fn same3(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 3, 1, 1)
    }

    pub fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut Rng) {
        let k = self.kernel;
        p.insert(
            format!("{}.w", self.name),
            init_weight(vec![self.cout, self.cin, k, k], self.cin * k * k, rng),
        );
        p.insert(format!("{}.b", self.name), Array::zeros(vec![self.cout]));
    }

    pub fn init_zero<T: Scalar>(&self, p: &mut Params<T>) {
        let k = self.kernel;
        p.insert(format!("{}.w", self.name), Array::zeros(vec![self.cout, self.cin, k, k]));
        p.insert(format!("{}.b", self.name), Array::zeros(vec![self.cout]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let w = b.var(&format!("{}.w", self.name))?;
        let bias = b.var(&format!("{}.b", self.name))?;
        Ok(g.conv2d(x, w, Some(bias), [self.stride; 2], [self.pad; 2])?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl Conv3d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Conv3d {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
        }
    }

    pub fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut Rng) {
        let [a, b, c] = self.kernel;
        p.insert(
            format!("{}.w", self.name),
            init_weight(vec![self.cout, self.cin, a, b, c], self.cin * a * b * c, rng),
        );
        p.insert(format!("{}.b", self.name), Array::zeros(vec![self.cout]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let w = b.var(&format!("{}.w", self.name))?;
        let bias = b.var(&format!("{}.b", self.name))?;
        Ok(g.conv3d(x, w, Some(bias), self.stride, [0; 3])?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    /// Uses `min(8, channels)` groups, reduced until it divides the channel count.
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let mut groups = channels.clamp(1, 8);
        while !channels.is_multiple_of(groups) {
            groups -= 1;
        }
        GroupNorm {
            name: name.into(),
            channels,
            groups,
        }
    }

    pub fn init<T: Scalar>(&self, p: &mut Params<T>) {
        p.insert(format!("{}.g", self.name), Array::ones(vec![self.channels]));
        p.insert(format!("{}.b", self.name), Array::zeros(vec![self.channels]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let gamma = b.var(&format!("{}.g", self.name))?;
        let beta = b.var(&format!("{}.b", self.name))?;
        Ok(g.group_norm(x, self.groups, gamma, beta, 1e-5)?)
    }
}

/// Fully connected stack with SiLU between layers and none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(name: &str, din: usize, hidden: &[usize], dout: usize) -> Self {
        let mut dims = vec![din];
        dims.extend_from_slice(hidden);
        dims.push(dout);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.l{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut Rng) {
        for l in &self.layers {
            l.init(p, rng);
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, mut x: Var) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, b, x)?;
            if i + 1 < self.layers.len() {
                x = g.silu(x)?;
            }
        }
        Ok(x)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has layers")
    }
}

/// Sinusoidal embedding of a scalar position (e.g. a diffusion timestep), `[dim]`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}
