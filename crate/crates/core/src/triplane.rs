//! Triplane containers and plane-aware layers.
//!
//! Planes are stored as one array `[3, C, R, R]` in the order xy, yz, zx.
//! Plane xy is indexed `(x, y)`, yz `(y, z)` and zx `(z, x)`, so each plane's
//! first axis is the previous plane's second axis. Batched graph values use
//! `[B * 3, C, R, R]` with the plane index varying fastest.

use triplane_tensor::{Array, Graph, Rng, Scalar, Var};

use crate::error::{CoreError, Result};
use crate::nn::{Bound, Conv2d, GroupNorm, Linear, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    Xy = 0,
    Yz = 1,
    Zx = 2,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Xy, Plane::Yz, Plane::Zx];

    /// World axes `(row, column)` that index this plane.
    pub fn axes(self) -> (usize, usize) {
        match self {
            Plane::Xy => (0, 1),
            Plane::Yz => (1, 2),
            Plane::Zx => (2, 0),
        }
    }
}

/// Three feature planes sharing resolution and channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct TriplaneSet<T> {
    planes: Array<T>,
}

impl<T: Scalar> TriplaneSet<T> {
    pub fn new(planes: Array<T>) -> Result<Self> {
        let s = planes.shape();
        if s.len() != 4 || s[0] != 3 || s[2] != s[3] {
            return Err(CoreError::Dimension("TriplaneSet", format!("expected [3, C, R, R], got {s:?}")));
        }
        Ok(TriplaneSet { planes })
    }

    pub fn from_planes(xy: &Array<T>, yz: &Array<T>, zx: &Array<T>) -> Result<Self> {
        if xy.shape() != yz.shape() || xy.shape() != zx.shape() || xy.ndim() != 3 {
            return Err(CoreError::Dimension(
                "TriplaneSet",
                format!("planes {:?}, {:?}, {:?} must share [C, R, R]", xy.shape(), yz.shape(), zx.shape()),
            ));
        }
        let mut data = Vec::with_capacity(3 * xy.len());
        for p in [xy, yz, zx] {
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![3];
        shape.extend_from_slice(xy.shape());
        Self::new(Array::new(shape, data)?)
    }

    pub fn zeros(channels: usize, resolution: usize) -> Self {
        TriplaneSet {
            planes: Array::zeros(vec![3, channels, resolution, resolution]),
        }
    }

    pub fn channels(&self) -> usize {
        self.planes.shape()[1]
    }

    pub fn resolution(&self) -> usize {
        self.planes.shape()[2]
    }

    pub fn as_array(&self) -> &Array<T> {
        &self.planes
    }

    pub fn into_array(self) -> Array<T> {
        self.planes
    }

    pub fn plane(&self, p: Plane) -> Array<T> {
        let w = self.planes.len() / 3;
        let i = p as usize;
        Array::new(self.planes.shape()[1..].to_vec(), self.planes.data()[i * w..(i + 1) * w].to_vec())
            .expect("plane slice")
    }

    /// Feature `c` of plane `p` at `(row, col)`.
    pub fn at(&self, p: Plane, c: usize, row: usize, col: usize) -> T {
        self.planes.at(&[p as usize, c, row, col])
    }

    pub fn num_scalars(&self) -> usize {
        self.planes.len()
    }
}

fn plane_of<T: Scalar>(g: &mut Graph<T>, x5: Var, p: usize) -> Result<Var> {
    let s = g.shape(x5).to_vec();
    let y = g.slice(x5, 1, p, p + 1)?;
    Ok(g.reshape(y, &[s[0], s[2], s[3], s[4]])?)
}

/// For each plane, the features of the other two planes averaged along the
/// axis they do not share with it, broadcast onto its grid. Input and output
/// are `[B * 3, C, R, R]`; output has `3C` channels `[own, next, prev]`.
pub fn triplane_context<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || !s[0].is_multiple_of(3) || s[2] != s[3] {
        return Err(CoreError::Dimension("triplane_context", format!("expected [B*3, C, R, R], got {s:?}")));
    }
    let (b, c, r) = (s[0] / 3, s[1], s[2]);
    let x5 = g.reshape(x, &[b, 3, c, r, r])?;
    let planes = [plane_of(g, x5, 0)?, plane_of(g, x5, 1)?, plane_of(g, x5, 2)?];
    let mut outs = Vec::with_capacity(3);
    for i in 0..3 {
        let next = planes[(i + 1) % 3];
        let prev = planes[(i + 2) % 3];
        // next plane's first axis is our column axis
        let n = g.mean_axis(next, 3, true)?;
        let n = g.reshape(n, &[b, c, 1, r])?;
        let n = g.broadcast_to(n, &[b, c, r, r])?;
        // previous plane's second axis is our row axis
        let pv = g.mean_axis(prev, 2, true)?;
        let pv = g.reshape(pv, &[b, c, r, 1])?;
        let pv = g.broadcast_to(pv, &[b, c, r, r])?;
        let cat = g.concat(&[planes[i], n, pv], 1)?;
        outs.push(g.reshape(cat, &[b, 1, 3 * c, r, r])?);
    }
    let y = g.concat(&outs, 1)?;
    Ok(g.reshape(y, &[b * 3, 3 * c, r, r])?)
}

/// 3D-aware plane convolution: a shared 2D convolution over each plane
/// concatenated with its cross-plane context.
#[derive(Debug, Clone)]
pub struct TriConv {
    pub conv: Conv2d,
}

impl TriConv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        TriConv {
            conv: Conv2d::new(name, 3 * cin, cout, kernel, 1, kernel / 2),
        }
    }

    pub fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut Rng) {
        self.conv.init(p, rng);
    }

    pub fn init_zero<T: Scalar>(&self, p: &mut Params<T>) {
        self.conv.init_zero(p);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let ctx = triplane_context(g, x)?;
        self.conv.forward(g, b, ctx)
    }
}

#[derive(Debug, Clone)]
enum PlaneConv {
    Plain(Conv2d),
    Aware(TriConv),
}

impl PlaneConv {
    fn new(name: String, cin: usize, cout: usize, aware: bool) -> Self {
        if aware {
            PlaneConv::Aware(TriConv::new(name, cin, cout, 3))
        } else {
            PlaneConv::Plain(Conv2d::same3(name, cin, cout))
        }
    }

    fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut Rng) {
        match self {
            PlaneConv::Plain(c) => c.init(p, rng),
            PlaneConv::Aware(c) => c.init(p, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        match self {
            PlaneConv::Plain(c) => c.forward(g, b, x),
            PlaneConv::Aware(c) => c.forward(g, b, x),
        }
    }
}

/// GroupNorm → SiLU → conv → (+ time embedding) → GroupNorm → SiLU → conv, plus skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: PlaneConv,
    norm2: GroupNorm,
    conv2: PlaneConv,
    skip: Option<Conv2d>,
    time: Option<Linear>,
    pub cin: usize,
    pub cout: usize,
}

impl ResBlock {
    /// `aware` selects [`TriConv`] for both convolutions; `time_dim` adds a
    /// projected embedding after the first convolution.
    pub fn new(name: &str, cin: usize, cout: usize, aware: bool, time_dim: Option<usize>) -> Self {
        ResBlock {
            norm1: GroupNorm::new(format!("{name}.n1"), cin),
            conv1: PlaneConv::new(format!("{name}.c1"), cin, cout, aware),
            norm2: GroupNorm::new(format!("{name}.n2"), cout),
            conv2: PlaneConv::new(format!("{name}.c2"), cout, cout, aware),
            skip: (cin != cout).then(|| Conv2d::new(format!("{name}.skip"), cin, cout, 1, 1, 0)),
            time: time_dim.map(|d| Linear::new(format!("{name}.t"), d, cout)),
            cin,
            cout,
        }
    }

    pub fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut Rng) {
        self.norm1.init(p);
        self.conv1.init(p, rng);
        self.norm2.init(p);
        self.conv2.init(p, rng);
        if let Some(s) = &self.skip {
            s.init(p, rng);
        }
        if let Some(t) = &self.time {
            t.init(p, rng);
        }
    }

    /// `x: [B * 3, cin, R, R]`; `temb: [B, time_dim]` when the block has a time projection.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, temb: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(g, b, x)?;
        let h = g.silu(h)?;
        let mut h = self.conv1.forward(g, b, h)?;
        if let (Some(lin), Some(t)) = (&self.time, temb) {
            let s = g.shape(h).to_vec();
            let batch = s[0] / 3;
            let tv = g.silu(t)?;
            let tp = lin.forward(g, b, tv)?;
            let tp = g.reshape(tp, &[batch, 1, self.cout, 1, 1])?;
            let h5 = g.reshape(h, &[batch, 3, s[1], s[2], s[3]])?;
            let h5 = g.add(h5, tp)?;
            h = g.reshape(h5, &s)?;
        }
        let h = self.norm2.forward(g, b, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, b, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(g, b, x)?,
            None => x,
        };
        Ok(g.add(h, skip)?)
    }
}
