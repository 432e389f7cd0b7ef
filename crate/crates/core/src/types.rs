//! Domain types shared by the kernels, the oracles and the gradient code.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{relu, Dtype, Real};

/// An `n x d` token matrix; row `i` is token `x_i`.
///
/// Construction checks `n >= 1`, `d >= 1` and that every entry is finite, so
/// downstream code never sees an empty or poisoned sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T = f64> {
    data: Array2<T>,
}

impl<T: Real> TokenSequence<T> {
    pub fn new(data: Array2<T>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::EmptyInput("token sequence has no tokens"));
        }
        if data.ncols() == 0 {
            return Err(Error::EmptyInput("tokens have dimension zero"));
        }
        check_finite(data.iter().copied(), "token sequence")?;
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::EmptyInput("token sequence has no tokens"));
        }
        let d = rows[0].len();
        let mut flat = Vec::with_capacity(n * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::shape(format!(
                    "row {i} has {} entries, expected {d}",
                    row.len()
                )));
            }
            flat.extend_from_slice(row);
        }
        let data = Array2::from_shape_vec((n, d), flat).map_err(|e| Error::shape(e.to_string()))?;
        Self::new(data)
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<T> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.data.row(i)
    }

    pub fn into_inner(self) -> Array2<T> {
        self.data
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), perm),
        }
    }

    pub fn cast<U: Real>(&self) -> TokenSequence<U> {
        TokenSequence {
            data: self.data.mapv(|x| U::from_f64_lossy(x.to_f64_lossy())),
        }
    }
}

pub(crate) fn check_finite<T: Real>(
    values: impl IntoIterator<Item = T>,
    what: &'static str,
) -> Result<()> {
    for (index, v) in values.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { what, index });
        }
    }
    Ok(())
}

/// Affine map `x -> M x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T = f64> {
    pub matrix: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Affine<T> {
    pub fn new(matrix: Array2<T>, bias: Array1<T>) -> Result<Self> {
        if matrix.nrows() != bias.len() {
            return Err(Error::shape(format!(
                "affine map has {} output rows but bias of length {}",
                matrix.nrows(),
                bias.len()
            )));
        }
        Ok(Self { matrix, bias })
    }

    pub fn linear(matrix: Array2<T>) -> Self {
        let bias = Array1::zeros(matrix.nrows());
        Self { matrix, bias }
    }

    pub fn identity(d: usize) -> Self {
        Self::linear(Array2::eye(d))
    }

    pub fn zeros(d: usize) -> Self {
        Self::linear(Array2::zeros((d, d)))
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Applies the map to every row of `x`.
    pub fn apply_rows(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut out = x.dot(&self.matrix.t());
        out += &self.bias;
        out
    }

    pub fn apply(&self, x: ArrayView1<'_, T>) -> Array1<T> {
        self.matrix.dot(&x) + &self.bias
    }

    fn validate(&self, d: usize, what: &str) -> Result<()> {
        if self.matrix.dim() != (d, d) || self.bias.len() != d {
            return Err(Error::shape(format!(
                "{what} must be {d}x{d} with bias of length {d}, got {:?} and {}",
                self.matrix.dim(),
                self.bias.len()
            )));
        }
        check_finite(self.matrix.iter().copied(), "affine matrix")?;
        check_finite(self.bias.iter().copied(), "affine bias")
    }

    pub fn cast<U: Real>(&self) -> Affine<U> {
        Affine {
            matrix: cast_array2(&self.matrix),
            bias: cast_array1(&self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Linear,
    Mlp1,
}

/// Token -> score map. Multi-head projections produce one score per head.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection<T = f64> {
    /// `s_h(u) = <w_h, u> + c_h`; `weight` is `H x d`.
    Linear { weight: Array2<T>, bias: Array1<T> },
    /// `s_h(u) = <w2_h, relu(W1 u + b1)> + c_h` with a `d`-wide hidden layer.
    Mlp1 {
        hidden_weight: Array2<T>,
        hidden_bias: Array1<T>,
        output_weight: Array2<T>,
        output_bias: Array1<T>,
    },
}

impl<T: Real> Projection<T> {
    /// Single-head linear projection onto `direction`.
    pub fn linear(direction: Array1<T>, bias: T) -> Self {
        let d = direction.len();
        Projection::Linear {
            weight: direction.into_shape_with_order((1, d)).expect("row vector"),
            bias: Array1::from_elem(1, bias),
        }
    }

    pub fn kind(&self) -> ProjectionKind {
        match self {
            Projection::Linear { .. } => ProjectionKind::Linear,
            Projection::Mlp1 { .. } => ProjectionKind::Mlp1,
        }
    }

    pub fn head_count(&self) -> usize {
        match self {
            Projection::Linear { bias, .. } => bias.len(),
            Projection::Mlp1 { output_bias, .. } => output_bias.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Projection::Linear { weight, .. } => weight.ncols(),
            Projection::Mlp1 { hidden_weight, .. } => hidden_weight.ncols(),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let h = self.head_count();
        if h == 0 {
            return Err(Error::config("projection must produce at least one score"));
        }
        match self {
            Projection::Linear { weight, bias } => {
                if weight.dim() != (h, d) {
                    return Err(Error::shape(format!(
                        "linear projection weight must be {h}x{d}, got {:?}",
                        weight.dim()
                    )));
                }
                check_finite(weight.iter().copied(), "projection weight")?;
                check_finite(bias.iter().copied(), "projection bias")
            }
            Projection::Mlp1 {
                hidden_weight,
                hidden_bias,
                output_weight,
                output_bias,
            } => {
                if hidden_weight.dim() != (d, d) || hidden_bias.len() != d {
                    return Err(Error::shape(format!(
                        "MLP projection hidden layer must be {d}x{d} with bias {d}, got {:?} and {}",
                        hidden_weight.dim(),
                        hidden_bias.len()
                    )));
                }
                if output_weight.dim() != (h, d) {
                    return Err(Error::shape(format!(
                        "MLP projection output weight must be {h}x{d}, got {:?}",
                        output_weight.dim()
                    )));
                }
                check_finite(hidden_weight.iter().copied(), "projection hidden weight")?;
                check_finite(hidden_bias.iter().copied(), "projection hidden bias")?;
                check_finite(output_weight.iter().copied(), "projection output weight")?;
                check_finite(output_bias.iter().copied(), "projection output bias")
            }
        }
    }

    /// Score of every row of `u` for output `head`.
    pub fn scores(&self, u: ArrayView2<'_, T>, head: usize) -> Array1<T> {
        match self {
            Projection::Linear { weight, bias } => {
                let mut s = u.dot(&weight.row(head));
                s += bias[head];
                s
            }
            Projection::Mlp1 {
                hidden_weight,
                hidden_bias,
                output_weight,
                output_bias,
            } => {
                let mut hidden = u.dot(&hidden_weight.t());
                hidden += hidden_bias;
                hidden.mapv_inplace(relu);
                let mut s = hidden.dot(&output_weight.row(head));
                s += output_bias[head];
                s
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Projection<U> {
        match self {
            Projection::Linear { weight, bias } => Projection::Linear {
                weight: cast_array2(weight),
                bias: cast_array1(bias),
            },
            Projection::Mlp1 {
                hidden_weight,
                hidden_bias,
                output_weight,
                output_bias,
            } => Projection::Mlp1 {
                hidden_weight: cast_array2(hidden_weight),
                hidden_bias: cast_array1(hidden_bias),
                output_weight: cast_array2(output_weight),
                output_bias: cast_array1(output_bias),
            },
        }
    }

    /// Same shape, every parameter zero.
    pub fn zeros_like(&self) -> Self {
        match self {
            Projection::Linear { weight, bias } => Projection::Linear {
                weight: Array2::zeros(weight.raw_dim()),
                bias: Array1::zeros(bias.raw_dim()),
            },
            Projection::Mlp1 {
                hidden_weight,
                hidden_bias,
                output_weight,
                output_bias,
            } => Projection::Mlp1 {
                hidden_weight: Array2::zeros(hidden_weight.raw_dim()),
                hidden_bias: Array1::zeros(hidden_bias.raw_dim()),
                output_weight: Array2::zeros(output_weight.raw_dim()),
                output_bias: Array1::zeros(output_bias.raw_dim()),
            },
        }
    }
}

/// Parameters of one attention head.
///
/// `mixer` is the per-head output matrix `W^h` used by the residual
/// multi-head layer; `slot` selects which projection output is this head's
/// score when the projection is shared across heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = f64> {
    pub query: Affine<T>,
    pub key: Affine<T>,
    pub value: Affine<T>,
    pub mixer: Array2<T>,
    pub projection: Projection<T>,
    pub slot: usize,
}

impl<T: Real> HeadParams<T> {
    /// Identity Q/K/V/W with the given projection.
    pub fn identity(d: usize, projection: Projection<T>) -> Self {
        Self {
            query: Affine::identity(d),
            key: Affine::identity(d),
            value: Affine::identity(d),
            mixer: Array2::eye(d),
            projection,
            slot: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.input_dim()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        self.query.validate(d, "query map")?;
        self.key.validate(d, "key map")?;
        self.value.validate(d, "value map")?;
        if self.mixer.dim() != (d, d) {
            return Err(Error::shape(format!(
                "output mixer must be {d}x{d}, got {:?}",
                self.mixer.dim()
            )));
        }
        check_finite(self.mixer.iter().copied(), "output mixer")?;
        self.projection.validate(d)?;
        if self.slot >= self.projection.head_count() {
            return Err(Error::config(format!(
                "head slot {} out of range for a projection with {} outputs",
                self.slot,
                self.projection.head_count()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> HeadParams<U> {
        HeadParams {
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            mixer: cast_array2(&self.mixer),
            projection: self.projection.cast(),
            slot: self.slot,
        }
    }
}

/// Which sliced kernel a layer evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Relu,
    Bump,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Variant::Relu),
            "bump" => Ok(Variant::Bump),
            other => Err(format!("unknown variant `{other}` (expected relu or bump)")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Relu => "relu",
            Variant::Bump => "bump",
        })
    }
}

/// Numerical knobs of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Floor added to the abs-diff normalizer.
    pub epsilon: f64,
    /// Subtract the mean value vector before mixing (ReLU kernel only).
    pub centering: bool,
    pub dtype: Dtype,
    /// Half-width of the bump kernel support.
    pub bandwidth: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self::relu()
    }
}

impl KernelConfig {
    pub fn relu() -> Self {
        Self {
            epsilon: Dtype::F64.default_epsilon(),
            centering: true,
            dtype: Dtype::F64,
            bandwidth: 1.0,
        }
    }

    pub fn bump(bandwidth: f64) -> Self {
        Self {
            centering: false,
            bandwidth,
            ..Self::relu()
        }
    }

    /// Defaults for `variant`, with the bump bandwidth left at 1.
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Relu => Self::relu(),
            Variant::Bump => Self::bump(1.0),
        }
    }

    /// Switches the element width and resets epsilon to that width's default.
    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self.epsilon = dtype.default_epsilon();
        self
    }

    pub fn with_centering(mut self, centering: bool) -> Self {
        self.centering = centering;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_bandwidth(mut self, bandwidth: f64) -> Self {
        self.bandwidth = bandwidth;
        self
    }

    pub fn validate<T: Real>(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::config(format!(
                "bandwidth must be > 0, got {}",
                self.bandwidth
            )));
        }
        if self.dtype != T::DTYPE {
            return Err(Error::config(format!(
                "configuration requests {} but the kernel runs in {}",
                self.dtype,
                T::DTYPE
            )));
        }
        Ok(())
    }
}

/// Two-layer perceptron `x -> W2 relu(W1 x + b1) + b2`, applied token-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = f64> {
    pub hidden_weight: Array2<T>,
    pub hidden_bias: Array1<T>,
    pub output_weight: Array2<T>,
    pub output_bias: Array1<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new(
        hidden_weight: Array2<T>,
        hidden_bias: Array1<T>,
        output_weight: Array2<T>,
        output_bias: Array1<T>,
    ) -> Result<Self> {
        let mlp = Self {
            hidden_weight,
            hidden_bias,
            output_weight,
            output_bias,
        };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, _) = self.hidden_weight.dim();
        if self.hidden_bias.len() != h
            || self.output_weight.ncols() != h
            || self.output_bias.len() != self.output_weight.nrows()
        {
            return Err(Error::shape(format!(
                "inconsistent perceptron shapes: W1 {:?}, b1 {}, W2 {:?}, b2 {}",
                self.hidden_weight.dim(),
                self.hidden_bias.len(),
                self.output_weight.dim(),
                self.output_bias.len()
            )));
        }
        check_finite(self.hidden_weight.iter().copied(), "perceptron W1")?;
        check_finite(self.hidden_bias.iter().copied(), "perceptron b1")?;
        check_finite(self.output_weight.iter().copied(), "perceptron W2")?;
        check_finite(self.output_bias.iter().copied(), "perceptron b2")
    }

    pub fn input_dim(&self) -> usize {
        self.hidden_weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.output_weight.nrows()
    }

    /// Exact identity on `R^d`, using `x = relu(x) - relu(-x)`.
    pub fn identity(d: usize) -> Self {
        let eye = Array2::<T>::eye(d);
        let mut hidden_weight = Array2::zeros((2 * d, d));
        hidden_weight.slice_mut(ndarray::s![..d, ..]).assign(&eye);
        hidden_weight
            .slice_mut(ndarray::s![d.., ..])
            .assign(&eye.mapv(|x| -x));
        let mut output_weight = Array2::zeros((d, 2 * d));
        output_weight.slice_mut(ndarray::s![.., ..d]).assign(&eye);
        output_weight
            .slice_mut(ndarray::s![.., d..])
            .assign(&eye.mapv(|x| -x));
        Self {
            hidden_weight,
            hidden_bias: Array1::zeros(2 * d),
            output_weight,
            output_bias: Array1::zeros(d),
        }
    }

    /// Scalar affine map `x -> <x, a> + b`, realised exactly through a
    /// two-unit hidden layer.
    pub fn affine_scalar(a: ArrayView1<'_, T>, b: T) -> Self {
        let d = a.len();
        let mut hidden_weight = Array2::zeros((2, d));
        hidden_weight.row_mut(0).assign(&a);
        hidden_weight.row_mut(1).assign(&a.mapv(|x| -x));
        let output_weight = ndarray::array![[T::one(), -T::one()]];
        Self {
            hidden_weight,
            hidden_bias: Array1::zeros(2),
            output_weight,
            output_bias: Array1::from_elem(1, b),
        }
    }

    pub fn apply(&self, x: ArrayView1<'_, T>) -> Array1<T> {
        let mut hidden = self.hidden_weight.dot(&x) + &self.hidden_bias;
        hidden.mapv_inplace(relu);
        self.output_weight.dot(&hidden) + &self.output_bias
    }

    pub fn apply_rows(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut hidden = x.dot(&self.hidden_weight.t());
        hidden += &self.hidden_bias;
        hidden.mapv_inplace(relu);
        let mut out = hidden.dot(&self.output_weight.t());
        out += &self.output_bias;
        out
    }
}

pub(crate) fn cast_array2<T: Real, U: Real>(a: &Array2<T>) -> Array2<U> {
    a.mapv(|x| U::from_f64_lossy(x.to_f64_lossy()))
}

pub(crate) fn cast_array1<T: Real, U: Real>(a: &Array1<T>) -> Array1<U> {
    a.mapv(|x| U::from_f64_lossy(x.to_f64_lossy()))
}
