use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Standard deviation of the weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub v: usize,
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl Dims {
    pub fn new(v: usize, d: usize, d_k: usize, d_v: usize) -> Result<Self> {
        let dims = Dims { v, d, d_k, d_v };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.v < 2 {
            return Err(Error::VocabularyTooSmall(self.v));
        }
        if self.d == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(Error::Config(format!("dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    RmsNorm,
    Identity,
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmsnorm" => Ok(NormMode::RmsNorm),
            "identity" => Ok(NormMode::Identity),
            other => Err(Error::Config(format!("unknown norm mode {other:?}"))),
        }
    }
}

/// Every trainable tensor of the model. Also used for gradients,
/// optimizer moments and averaged parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensors {
    /// `v x d`
    pub embed: Matrix,
    /// `d`
    pub gains: Vec<f64>,
    /// `d x d_k`
    pub w_q: Matrix,
    /// `d x d_k`
    pub w_k: Matrix,
    /// `d x d_v`
    pub w_v: Matrix,
    /// `d_v x d`
    pub w_o: Matrix,
    /// `d x v`
    pub unembed: Matrix,
}

pub const TENSOR_NAMES: [&str; 7] = ["embed", "gains", "w_q", "w_k", "w_v", "w_o", "unembed"];

/// Weight decay never touches the embedding or the norm gains.
pub const DECAYED: [bool; 7] = [false, false, true, true, true, true, true];

impl Tensors {
    pub fn zeros(dims: &Dims) -> Self {
        let Dims { v, d, d_k, d_v } = *dims;
        Tensors {
            embed: Matrix::zeros(v, d),
            gains: vec![0.0; d],
            w_q: Matrix::zeros(d, d_k),
            w_k: Matrix::zeros(d, d_k),
            w_v: Matrix::zeros(d, d_v),
            w_o: Matrix::zeros(d_v, d),
            unembed: Matrix::zeros(d, v),
        }
    }

    pub fn slices(&self) -> [&[f64]; 7] {
        [
            self.embed.as_slice(),
            &self.gains,
            self.w_q.as_slice(),
            self.w_k.as_slice(),
            self.w_v.as_slice(),
            self.w_o.as_slice(),
            self.unembed.as_slice(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.embed.as_mut_slice(),
            &mut self.gains,
            self.w_q.as_mut_slice(),
            self.w_k.as_mut_slice(),
            self.w_v.as_mut_slice(),
            self.w_o.as_mut_slice(),
            self.unembed.as_mut_slice(),
        ]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.slices().into_iter().flat_map(|s| s.iter().copied())
    }

    /// Flat read-only index across all tensors, in `TENSOR_NAMES` order.
    pub fn get(&self, mut idx: usize) -> f64 {
        for s in self.slices() {
            if idx < s.len() {
                return s[idx];
            }
            idx -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn get_mut(&mut self, mut idx: usize) -> &mut f64 {
        for s in self.slices_mut() {
            if idx < s.len() {
                return &mut s[idx];
            }
            idx -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn same_shape(&self, other: &Tensors) -> bool {
        self.embed.shape() == other.embed.shape()
            && self.gains.len() == other.gains.len()
            && self.w_q.shape() == other.w_q.shape()
            && self.w_k.shape() == other.w_k.shape()
            && self.w_v.shape() == other.w_v.shape()
            && self.w_o.shape() == other.w_o.shape()
            && self.unembed.shape() == other.unembed.shape()
    }

    /// `self = f(self, other)` elementwise.
    pub fn zip_apply(&mut self, other: &Tensors, f: impl Fn(&mut f64, f64)) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (a, &b) in dst.iter_mut().zip(src) {
                f(a, b);
            }
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(&mut f64)) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(&f);
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: Dims,
    pub norm: NormMode,
    pub norm_eps: f64,
    pub tensors: Tensors,
}

impl ModelParams {
    pub fn new(dims: Dims, norm: NormMode, norm_eps: f64, tensors: Tensors) -> Result<Self> {
        let p = ModelParams { dims, norm, norm_eps, tensors };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config(format!("norm epsilon must be positive, got {}", self.norm_eps)));
        }
        if !self.tensors.same_shape(&Tensors::zeros(&self.dims)) {
            return Err(Error::Shape(format!("tensors do not match {:?}", self.dims)));
        }
        if !self.tensors.is_finite() {
            return Err(Error::Config("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn with_tensors(&self, tensors: Tensors) -> ModelParams {
        ModelParams { dims: self.dims, norm: self.norm, norm_eps: self.norm_eps, tensors }
    }
}

/// `N(0, sigma^2)` truncated to `[-2 sigma, 2 sigma]` by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return sigma * z;
        }
    }
}

pub fn init_params<R: Rng + ?Sized>(dims: Dims, norm: NormMode, norm_eps: f64, rng: &mut R) -> Result<ModelParams> {
    dims.validate()?;
    let mut tensors = Tensors::zeros(&dims);
    for (i, s) in tensors.slices_mut().into_iter().enumerate() {
        if TENSOR_NAMES[i] == "gains" {
            s.fill(1.0);
        } else {
            s.iter_mut().for_each(|x| *x = truncated_normal(rng, INIT_STD));
        }
    }
    ModelParams::new(dims, norm, norm_eps, tensors)
}
